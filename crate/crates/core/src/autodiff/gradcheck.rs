//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::AutodiffError;

/// Anything that owns a [`ParamStore`].
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares backprop gradients of `loss` against central differences with
/// the given step, over every entry of every parameter.
///
/// `loss` is evaluated on a training-mode graph and must be deterministic
/// (reseed any RNG inside the closure).
pub fn gradient_check<M, F, E>(model: &mut M, step: f64, loss: F) -> Result<GradCheck, E>
where
    M: HasParams,
    F: Fn(&M, &mut Graph<'_>) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let eval = |m: &M| -> Result<f64, E> {
        let mut g = Graph::training(m.params());
        let l = loss(m, &mut g)?;
        let v = g.value(l).item();
        v.ok_or_else(|| AutodiffError::NonScalarLoss(g.shape(l).to_vec()).into())
    };

    let grads = {
        let mut g = Graph::training(model.params());
        let l = loss(model, &mut g)?;
        g.backward(l)?
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = model.params().get(id).value.len();
        let analytic = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for (e, &grad) in analytic.iter().enumerate() {
            let orig = model.params().get(id).value.data()[e];
            model.params_mut().get_mut(id).value.data_mut()[e] = orig + step;
            let plus = eval(model)?;
            model.params_mut().get_mut(id).value.data_mut()[e] = orig - step;
            let minus = eval(model)?;
            model.params_mut().get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad, numeric);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = err;
                report.worst_parameter = model.params().get(id).name.clone();
                report.worst_entry = e;
                report.analytic = grad;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
