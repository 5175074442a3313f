//! Central finite-difference check of analytic gradients.

use std::collections::BTreeMap;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet, ParamVars};

/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error over the entries of each parameter.
    pub per_param: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.values().all(|&e| e < self.tolerance)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(n, e)| (n.as_str(), *e))
    }

    pub fn failing(&self) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|(_, &e)| e >= self.tolerance)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Value of the loss built by `f` at `params`, without a backward pass.
pub fn eval_loss<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.register(&mut g, &Default::default());
    let loss = f(&mut g, &vars)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(v)
}

/// Analytic gradient of the loss built by `f` with respect to every entry.
pub fn analytic_gradient<F>(f: &F, params: &ParamSet) -> Result<GradMap>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.register(&mut g, &params.all_names());
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(g.backward(loss)?.into_map())
}

/// Compares `analytic` against central differences of `f` with the given step.
pub fn compare_gradients<F>(
    f: &F,
    params: &ParamSet,
    analytic: &GradMap,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let mut per_param = BTreeMap::new();
    let mut probe = params.clone();
    for name in params.names() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        let n = params.get(name)?.numel();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + step;
            let up = eval_loss(f, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - step;
            let down = eval_loss(f, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport {
        per_param,
        tolerance,
    })
}

/// Checks the tape's gradient of `f` against central finite differences.
pub fn grad_check<F>(f: F, params: &ParamSet, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, params)?;
    compare_gradients(&f, params, &analytic, step, tolerance)
}
