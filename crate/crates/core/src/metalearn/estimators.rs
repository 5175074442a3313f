use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::learner::{descend, gradient, optimizer, Objective};
use crate::params::{grad_sub, GradMap, ParamSet, TrainableSet};

/// Default ceiling on trainable scalars for the exact estimator.
pub const DEFAULT_EXACT_PARAM_LIMIT: usize = 20_000;

#[derive(Clone, Debug)]
pub struct MetaGradient {
    /// Gradient of `L_{D′}(θ′)` with respect to `θ`, over the trainable names.
    pub grads: GradMap,
    /// `L_D(θ)`
    pub inner_loss: f64,
    /// `L_{D′}(θ′)`
    pub outer_loss: f64,
}

/// Names moved by the simulated inner step and names the meta-gradient is
/// taken for.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaSets {
    pub inner: TrainableSet,
    pub outer: TrainableSet,
}

impl MetaSets {
    pub fn same(names: TrainableSet) -> Self {
        MetaSets {
            inner: names.clone(),
            outer: names,
        }
    }

    pub fn union(&self) -> TrainableSet {
        self.inner.union(&self.outer).cloned().collect()
    }
}

fn restrict(mut g: GradMap, names: &TrainableSet) -> GradMap {
    g.retain(|k, _| names.contains(k));
    g
}

/// Estimates `∇_θ L_{D′}(θ − η ∇L_D(θ))`.
pub trait MetaGradientEstimator<D> {
    fn name(&self) -> &'static str;

    fn meta_gradient(
        &self,
        obj: &dyn Objective<D>,
        theta: &ParamSet,
        sets: &MetaSets,
        d: &D,
        dprime: &D,
        eta: f64,
    ) -> Result<MetaGradient>;
}

fn check_eta(eta: f64) -> Result<()> {
    if eta >= 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("inner rate must be >= 0, got {eta}")))
    }
}

/// `∇_{θ′} L_{D′}(θ′)`, dropping the second-order term.
#[derive(Clone, Copy, Debug, Default)]
pub struct FirstOrder;

/// First-order estimate with the inner step taken by a freshly initialized
/// Adam optimizer instead of plain gradient descent. A fresh Adam step moves
/// every coordinate with a non-zero gradient by about `η`.
#[derive(Clone, Copy, Debug, Default)]
pub struct FirstOrderAdam;

impl<D> MetaGradientEstimator<D> for FirstOrderAdam {
    fn name(&self) -> &'static str {
        "first_order"
    }

    fn meta_gradient(
        &self,
        obj: &dyn Objective<D>,
        theta: &ParamSet,
        sets: &MetaSets,
        d: &D,
        dprime: &D,
        eta: f64,
    ) -> Result<MetaGradient> {
        check_eta(eta)?;
        let (inner_loss, g_d) = gradient(obj, theta, &sets.inner, d)?;
        let mut adapted = theta.clone();
        optimizer("adam")?.step(&mut adapted, &g_d, eta)?;
        let (outer_loss, grads) = gradient(obj, &adapted, &sets.outer, dprime)?;
        Ok(MetaGradient {
            grads,
            inner_loss,
            outer_loss,
        })
    }
}

impl<D> MetaGradientEstimator<D> for FirstOrder {
    fn name(&self) -> &'static str {
        "first_order"
    }

    fn meta_gradient(
        &self,
        obj: &dyn Objective<D>,
        theta: &ParamSet,
        sets: &MetaSets,
        d: &D,
        dprime: &D,
        eta: f64,
    ) -> Result<MetaGradient> {
        check_eta(eta)?;
        let (inner_loss, g_d) = gradient(obj, theta, &sets.inner, d)?;
        let adapted = descend(theta, &g_d, eta)?;
        let (outer_loss, grads) = gradient(obj, &adapted, &sets.outer, dprime)?;
        Ok(MetaGradient {
            grads,
            inner_loss,
            outer_loss,
        })
    }
}

/// Second-order term by a finite difference of gradients:
/// `v − (η/ν) (∇L_D(θ + νv) − ∇L_D(θ))` with `v = ∇_{θ′} L_{D′}(θ′)`.
#[derive(Clone, Copy, Debug)]
pub struct Hvp {
    pub nu: f64,
}

impl<D> MetaGradientEstimator<D> for Hvp {
    fn name(&self) -> &'static str {
        "hvp"
    }

    fn meta_gradient(
        &self,
        obj: &dyn Objective<D>,
        theta: &ParamSet,
        sets: &MetaSets,
        d: &D,
        dprime: &D,
        eta: f64,
    ) -> Result<MetaGradient> {
        check_eta(eta)?;
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidArgument(format!("nu must be > 0, got {}", self.nu)));
        }
        let all = sets.union();
        let (inner_loss, g_all) = gradient(obj, theta, &all, d)?;
        let adapted = descend(theta, &restrict(g_all.clone(), &sets.inner), eta)?;
        let (outer_loss, v) = gradient(obj, &adapted, &all, dprime)?;
        let probe = descend(theta, &restrict(v.clone(), &sets.inner), -self.nu)?;
        let (_, g_probe) = gradient(obj, &probe, &sets.outer, d)?;
        let diff = grad_sub(&g_probe, &restrict(g_all, &sets.outer))?;
        let mut grads = restrict(v, &sets.outer);
        for (name, t) in grads.iter_mut() {
            if let Some(dv) = diff.get(name) {
                t.axpy(-eta / self.nu, dv)?;
            }
        }
        Ok(MetaGradient {
            grads,
            inner_loss,
            outer_loss,
        })
    }
}

/// Differentiates through the inner step on one graph (double backward).
#[derive(Clone, Copy, Debug)]
pub struct Exact {
    pub param_limit: usize,
}

impl Default for Exact {
    fn default() -> Self {
        Exact {
            param_limit: DEFAULT_EXACT_PARAM_LIMIT,
        }
    }
}

impl<D> MetaGradientEstimator<D> for Exact {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn meta_gradient(
        &self,
        obj: &dyn Objective<D>,
        theta: &ParamSet,
        sets: &MetaSets,
        d: &D,
        dprime: &D,
        eta: f64,
    ) -> Result<MetaGradient> {
        check_eta(eta)?;
        let all = sets.union();
        let count = theta.num_scalars(Some(&all));
        if count > self.param_limit {
            return Err(Error::TooManyParams {
                count,
                limit: self.param_limit,
            });
        }
        let mut g = Graph::new();
        let vars = theta.register(&mut g, &all);
        let inner = obj.loss(&mut g, &vars, d)?;
        let inner_loss = g.value(inner).item();
        let names: Vec<&String> = sets.inner.iter().filter(|n| vars.contains_key(*n)).collect();
        let wrt: Vec<_> = names.iter().map(|n| vars[*n]).collect();
        let grads = g.grad_graph(inner, &wrt)?;
        let mut adapted = vars.clone();
        for ((name, &v), gv) in names.iter().zip(&wrt).zip(grads) {
            if let Some(gv) = gv {
                let step = g.scale(gv, -eta)?;
                adapted.insert((*name).clone(), g.add(v, step)?);
            }
        }
        let outer = obj.loss(&mut g, &adapted, dprime)?;
        let outer_loss = g.value(outer).item();
        if !(inner_loss.is_finite() && outer_loss.is_finite()) {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(MetaGradient {
            grads: restrict(g.backward(outer)?.into_map(), &sets.outer),
            inner_loss,
            outer_loss,
        })
    }
}

pub const ESTIMATORS: [&str; 3] = ["exact", "hvp", "first_order"];

pub const INNER_OPTIMIZERS: [&str; 2] = ["sgd", "adam"];

/// Looks an estimator up by name. Only `first_order` accepts an `adam`
/// inner step; the other estimators assume `θ′ = θ − η∇L_D(θ)`.
pub fn estimator<D>(
    name: &str,
    inner_optimizer: &str,
    nu: f64,
    exact_param_limit: usize,
) -> Result<Box<dyn MetaGradientEstimator<D>>> {
    match inner_optimizer {
        "sgd" => {}
        "adam" if name == "first_order" => return Ok(Box::new(FirstOrderAdam)),
        "adam" => {
            return Err(Error::InvalidArgument(format!(
                "the {name} estimator needs an sgd inner step"
            )))
        }
        other => {
            return Err(Error::UnknownName {
                kind: "inner optimizer",
                name: other.to_string(),
                known: INNER_OPTIMIZERS.join(", "),
            })
        }
    }
    match name {
        "first_order" => Ok(Box::new(FirstOrder)),
        "hvp" => Ok(Box::new(Hvp { nu })),
        "exact" => Ok(Box::new(Exact {
            param_limit: exact_param_limit,
        })),
        _ => Err(Error::UnknownName {
            kind: "meta-gradient estimator",
            name: name.to_string(),
            known: ESTIMATORS.join(", "),
        }),
    }
}
