//! Gradient-based learning on one task: the regularized objective, a
//! full fine-tuning loop with early stopping, and the single plain step used
//! inside meta-training.

mod optim;
mod translation;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::FineTuneStrategy;
use crate::params::{GradMap, ParamSet, ParamVars, TrainableSet};

pub use optim::{optimizer, Adam, Optimizer, Sgd, OPTIMIZERS};
pub use translation::{
    batches_by_tokens, eval_batches, fine_tune, fine_tune_trainable, Batch, BatchStream,
    TranslationObjective,
};

/// A scalar loss over some data, built on a graph from registered parameters.
pub trait Objective<D> {
    fn loss(&self, g: &mut Graph, vars: &ParamVars, data: &D) -> Result<Var>;

    /// Weight of `data` when averaging losses over several batches.
    fn weight(&self, _data: &D) -> f64 {
        1.0
    }
}

/// `base + β Σ_{trainable} ‖θ − θ⁰‖²`.
pub struct Regularized<'a, D> {
    pub base: &'a dyn Objective<D>,
    pub theta0: &'a ParamSet,
    pub trainable: &'a TrainableSet,
    pub beta: f64,
}

/// The squared distance `Σ_{trainable} ‖θ − θ⁰‖²` as a graph node.
pub fn proximity(
    g: &mut Graph,
    vars: &ParamVars,
    theta0: &ParamSet,
    trainable: &TrainableSet,
) -> Result<Var> {
    let mut total = None;
    for name in trainable {
        let v = *vars
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?;
        let anchor = theta0.get(name)?;
        if anchor.shape() != g.shape(v) {
            return Err(Error::shape("proximity", g.shape(v), anchor.shape()));
        }
        let c = g.constant(anchor.clone());
        let diff = g.sub(v, c)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(crate::autodiff::Tensor::scalar(0.0))),
    }
}

/// The language-specific objective: the base loss plus `β ‖θ − θ⁰‖²` over
/// the trainable names.
pub fn inner_objective<D>(
    base: &dyn Objective<D>,
    g: &mut Graph,
    vars: &ParamVars,
    data: &D,
    theta0: &ParamSet,
    trainable: &TrainableSet,
    beta: f64,
) -> Result<Var> {
    let loss = base.loss(g, vars, data)?;
    if beta == 0.0 {
        for name in trainable {
            let v = *vars
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if theta0.get(name)?.shape() != g.shape(v) {
                return Err(Error::shape("proximity", g.shape(v), theta0.get(name)?.shape()));
            }
        }
        return Ok(loss);
    }
    let prox = proximity(g, vars, theta0, trainable)?;
    let pen = g.scale(prox, beta)?;
    g.add(loss, pen)
}

impl<D> Objective<D> for Regularized<'_, D> {
    fn loss(&self, g: &mut Graph, vars: &ParamVars, data: &D) -> Result<Var> {
        inner_objective(self.base, g, vars, data, self.theta0, self.trainable, self.beta)
    }

    fn weight(&self, data: &D) -> f64 {
        self.base.weight(data)
    }
}

/// Loss value and gradient over `trainable` at `theta`.
pub fn gradient<D>(
    obj: &dyn Objective<D>,
    theta: &ParamSet,
    trainable: &TrainableSet,
    data: &D,
) -> Result<(f64, GradMap)> {
    let mut g = Graph::new();
    let vars = theta.register(&mut g, trainable);
    let loss = obj.loss(&mut g, &vars, data)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((value, g.backward(loss)?.into_map()))
}

/// Loss value only.
pub fn evaluate<D>(obj: &dyn Objective<D>, theta: &ParamSet, data: &D) -> Result<f64> {
    let mut g = Graph::new();
    let vars = theta.register(&mut g, &TrainableSet::new());
    let loss = obj.loss(&mut g, &vars, data)?;
    Ok(g.value(loss).item())
}

/// Weighted mean loss over several batches.
pub fn mean_loss<D>(obj: &dyn Objective<D>, theta: &ParamSet, data: &[D]) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for d in data {
        let w = obj.weight(d);
        total += w * evaluate(obj, theta, d)?;
        weight += w;
    }
    if weight == 0.0 {
        return Err(Error::InvalidArgument("no data to average over".into()));
    }
    Ok(total / weight)
}

/// `theta − eta · grads`.
pub fn descend(theta: &ParamSet, grads: &GradMap, eta: f64) -> Result<ParamSet> {
    let mut out = theta.clone();
    out.axpy_map(-eta, grads)?;
    Ok(out)
}

/// One plain gradient-descent step `θ′ = θ − η ∇L(θ)` on `trainable`.
/// Also returns the gradient and the loss at `theta`.
pub fn simulate_step<D>(
    obj: &dyn Objective<D>,
    theta: &ParamSet,
    trainable: &TrainableSet,
    data: &D,
    eta: f64,
) -> Result<(ParamSet, GradMap, f64)> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("inner rate must be > 0, got {eta}")));
    }
    let (loss, grads) = gradient(obj, theta, trainable, data)?;
    Ok((descend(theta, &grads, eta)?, grads, loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    /// Prior precision on `‖θ − θ⁰‖²`.
    pub beta: f64,
    pub lr: f64,
    pub optimizer: String,
    pub max_steps: usize,
    /// Dev evaluations without improvement tolerated before stopping.
    pub patience: usize,
    pub batch_tokens: usize,
    pub strategy: FineTuneStrategy,
    /// Steps between dev evaluations.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            beta: 0.0,
            lr: 1e-3,
            optimizer: "adam".into(),
            max_steps: 200,
            patience: 3,
            batch_tokens: 512,
            strategy: FineTuneStrategy::All,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive".into());
        }
        optimizer(&self.optimizer).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Learned {
    pub params: ParamSet,
    pub history: Vec<LearnRecord>,
    /// Step whose parameters were returned.
    pub best_step: usize,
    pub steps: usize,
}

/// Runs up to `cfg.max_steps` updates of `trainable` from `theta0`, drawing
/// the batch of step `s` from `next_batch(s)`. With dev data the parameters
/// of the best dev loss are returned and training stops after `patience`
/// evaluations without improvement; without it, the last parameters are.
pub fn learn<D>(
    obj: &dyn Objective<D>,
    theta0: &ParamSet,
    trainable: &TrainableSet,
    next_batch: &mut dyn FnMut(usize) -> Result<D>,
    dev: &[D],
    cfg: &LearnConfig,
) -> Result<Learned> {
    cfg.validate()?;
    let reg = Regularized {
        base: obj,
        theta0,
        trainable,
        beta: cfg.beta,
    };
    let mut opt = optimizer(&cfg.optimizer)?;
    let mut theta = theta0.clone();
    let mut history = Vec::new();
    let mut best = None;
    if !dev.is_empty() {
        let d = mean_loss(obj, &theta, dev)?;
        history.push(LearnRecord {
            step: 0,
            train_loss: None,
            dev_loss: Some(d),
        });
        best = Some((d, 0, theta.clone()));
    }
    let mut bad = 0;
    let mut steps = 0;
    for step in 1..=cfg.max_steps {
        let batch = next_batch(step)?;
        let (loss, grads) = gradient(&reg, &theta, trainable, &batch).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                step,
                reason: format!("non-finite {what}"),
            },
            e => e,
        })?;
        opt.step(&mut theta, &grads, cfg.lr)?;
        if !theta.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameters".into(),
            });
        }
        steps = step;
        let mut rec = LearnRecord {
            step,
            train_loss: Some(loss),
            dev_loss: None,
        };
        if !dev.is_empty() && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let d = mean_loss(obj, &theta, dev)?;
            if !d.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite dev loss".into(),
                });
            }
            rec.dev_loss = Some(d);
            let (best_loss, _, _) = best.as_ref().unwrap();
            if d < *best_loss {
                best = Some((d, step, theta.clone()));
                bad = 0;
            } else {
                bad += 1;
            }
        }
        history.push(rec);
        if bad > cfg.patience {
            break;
        }
    }
    let (params, best_step) = match best {
        Some((_, s, p)) => (p, s),
        None => (theta, steps),
    };
    Ok(Learned {
        params,
        history,
        best_step,
        steps,
    })
}


#[cfg(test)]
mod tests {
    use super::toy::*;
    use super::*;
    use crate::autodiff::Tensor;
    use crate::params::Partition;

    fn cfg(opt: &str, lr: f64, steps: usize) -> LearnConfig {
        LearnConfig {
            lr,
            optimizer: opt.into(),
            max_steps: steps,
            ..Default::default()
        }
    }

    fn quad(c: &[f64]) -> Quadratic {
        Quadratic {
            center: params(c),
            curvature: 1.0,
        }
    }

    #[test]
    fn zero_beta_is_base_loss() {
        let q = quad(&[1.0, 2.0, 3.0]);
        let theta = params(&[0.5, -1.0, 2.0]);
        let theta0 = params(&[9.0, 9.0, 9.0]);
        let mut g = Graph::new();
        let vars = theta.register(&mut g, &theta.all_names());
        let base = q.loss(&mut g, &vars, &()).unwrap();
        let reg = inner_objective(&q, &mut g, &vars, &(), &theta0, &theta.all_names(), 0.0).unwrap();
        assert_eq!(g.value(base).item(), g.value(reg).item());
    }

    #[test]
    fn penalty_matches_hand_sum() {
        let q = quad(&[0.0, 0.0, 0.0]);
        let theta = params(&[1.0, 2.0, 3.0]);
        let theta0 = params(&[0.5, 2.5, -1.0]);
        let names = theta.all_names();
        let mut g = Graph::new();
        let vars = theta.register(&mut g, &names);
        let base_var = q.loss(&mut g, &vars, &()).unwrap();
        let base = g.value(base_var).item();
        let total = inner_objective(&q, &mut g, &vars, &(), &theta0, &names, 1.0).unwrap();
        let hand = 0.5f64.powi(2) + 0.5f64.powi(2) + 4.0f64.powi(2);
        assert!((g.value(total).item() - base - hand).abs() < 1e-12);

        let same = inner_objective(&q, &mut g, &vars, &(), &theta, &names, 1.0).unwrap();
        assert_eq!(g.value(same).item(), base);
    }

    #[test]
    fn penalty_rejects_mismatched_anchor() {
        let q = quad(&[0.0, 0.0, 0.0]);
        let theta = params(&[1.0, 2.0, 3.0]);
        let mut other = ParamSet::new();
        other.insert("a", Partition::Encoder, Tensor::vector(vec![0.0; 2]));
        let mut g = Graph::new();
        let vars = theta.register(&mut g, &theta.all_names());
        assert!(inner_objective(&q, &mut g, &vars, &(), &other, &theta.all_names(), 1.0).is_err());
    }

    #[test]
    fn zero_rate_keeps_theta() {
        let q = quad(&[1.0, 2.0, 3.0]);
        let theta0 = params(&[0.3, 0.1, -0.2]);
        for opt in OPTIMIZERS {
            let out = learn(&q, &theta0, &theta0.all_names(), &mut |_| Ok(()), &[], &cfg(opt, 0.0, 1))
                .unwrap();
            assert_eq!(out.params, theta0);
        }
        assert!(learn(&q, &theta0, &theta0.all_names(), &mut |_| Ok(()), &[], &cfg("sgd", 0.1, 0)).is_err());
    }

    #[test]
    fn one_sgd_step_closed_form() {
        let c = [1.0, 2.0, 3.0];
        let q = quad(&c);
        let t0 = [0.3, 0.1, -0.2];
        let theta0 = params(&t0);
        let eta = 0.25;
        let out = learn(&q, &theta0, &theta0.all_names(), &mut |_| Ok(()), &[], &cfg("sgd", eta, 1))
            .unwrap();
        let expect: Vec<f64> = t0.iter().zip(c).map(|(t, c)| t - eta * (t - c)).collect();
        assert_eq!(out.params, params(&expect));
        let (sim, _, _) = simulate_step(&q, &theta0, &theta0.all_names(), &(), eta).unwrap();
        assert_eq!(sim, params(&expect));
    }

    #[test]
    fn early_stop_returns_initial_snapshot() {
        // training pulls towards c, dev prefers theta0
        let q = quad(&[5.0, 5.0, 5.0]);
        let dev_obj = quad(&[0.0, 0.0, 0.0]);
        struct Mixed<'a> {
            train: &'a Quadratic,
            dev: &'a Quadratic,
        }
        impl Objective<bool> for Mixed<'_> {
            fn loss(&self, g: &mut Graph, vars: &ParamVars, is_dev: &bool) -> Result<Var> {
                if *is_dev {
                    self.dev.loss(g, vars, &())
                } else {
                    self.train.loss(g, vars, &())
                }
            }
        }
        let obj = Mixed { train: &q, dev: &dev_obj };
        let theta0 = params(&[0.0, 0.0, 0.0]);
        let c = LearnConfig {
            patience: 1,
            eval_every: 1,
            ..cfg("sgd", 0.1, 50)
        };
        let out = learn(&obj, &theta0, &theta0.all_names(), &mut |_| Ok(false), &[true], &c).unwrap();
        assert_eq!(out.best_step, 0);
        assert_eq!(out.params, theta0);
        assert_eq!(out.steps, 2);
    }

    #[test]
    fn frozen_names_untouched() {
        let q = quad(&[1.0, 2.0, 3.0]);
        let theta0 = params(&[0.3, 0.1, -0.2]);
        let only_a: TrainableSet = ["a".to_string()].into();
        let out = learn(&q, &theta0, &only_a, &mut |_| Ok(()), &[], &cfg("adam", 0.1, 5)).unwrap();
        assert_eq!(out.params.get("b").unwrap(), theta0.get("b").unwrap());
        assert_ne!(out.params.get("a").unwrap(), theta0.get("a").unwrap());
    }

    #[test]
    fn sgd_descends_monotonically_below_inverse_curvature() {
        let q = Quadratic {
            center: params(&[1.0, -2.0, 3.0]),
            curvature: 4.0,
        };
        let mut theta = params(&[0.0, 0.0, 0.0]);
        let names = theta.all_names();
        let mut prev = evaluate(&q, &theta, &()).unwrap();
        for _ in 0..20 {
            let (next, _, _) = simulate_step(&q, &theta, &names, &(), 0.2).unwrap();
            let l = evaluate(&q, &next, &()).unwrap();
            assert!(l < prev);
            prev = l;
            theta = next;
        }
    }

    #[test]
    fn simulate_step_linear_in_eta() {
        let q = quad(&[1.0, 2.0, 3.0]);
        let theta = params(&[0.5, 0.25, -0.75]);
        let names = theta.all_names();
        let (a, _, _) = simulate_step(&q, &theta, &names, &(), 0.125).unwrap();
        let (b, _, _) = simulate_step(&q, &theta, &names, &(), 0.25).unwrap();
        let da = a.sub(&theta).unwrap();
        let db = b.sub(&theta).unwrap();
        assert_eq!(da.scale(2.0), db);
        assert!(simulate_step(&q, &theta, &names, &(), 0.0).is_err());
    }

    #[test]
    fn constant_loss_leaves_theta() {
        struct Constant;
        impl Objective<()> for Constant {
            fn loss(&self, g: &mut Graph, _: &ParamVars, _: &()) -> Result<Var> {
                Ok(g.constant(Tensor::scalar(3.0)))
            }
        }
        let theta = params(&[0.5, 0.25, -0.75]);
        let (next, _, _) = simulate_step(&Constant, &theta, &theta.all_names(), &(), 0.5).unwrap();
        assert_eq!(next, theta);
    }

    #[test]
    fn divergence_reports_step() {
        struct Explode;
        impl Objective<()> for Explode {
            fn loss(&self, g: &mut Graph, vars: &ParamVars, _: &()) -> Result<Var> {
                let a = g.mul(vars["a"], vars["a"])?;
                let s = g.sum(a)?;
                g.scale(s, 1e200)
            }
        }
        let theta = params(&[1.0, 1.0, 1.0]);
        let err = learn(&Explode, &theta, &theta.all_names(), &mut |_| Ok(()), &[], &cfg("sgd", 1.0, 5))
            .unwrap_err();
        assert!(err.is_numerical(), "{err:?}");
    }
}
