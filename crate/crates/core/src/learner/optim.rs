use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};

/// A first-order update rule applied to the names present in `grads`.
pub trait Optimizer {
    fn name(&self) -> &'static str;
    fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()>;
}

#[derive(Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        params.axpy_map(-lr, grads)
    }
}

#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub const OPTIMIZERS: [&str; 2] = ["sgd", "adam"];

/// Looks an optimizer up by name.
pub fn optimizer(name: &str) -> Result<Box<dyn Optimizer>> {
    match name {
        "sgd" => Ok(Box::new(Sgd)),
        "adam" => Ok(Box::<Adam>::default()),
        _ => Err(Error::UnknownName {
            kind: "optimizer",
            name: name.to_string(),
            known: OPTIMIZERS.join(", "),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Partition;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("x", Partition::Encoder, Tensor::vector(vec![1.0, -1.0, 0.0]));
        let g: GradMap = [("x".to_string(), Tensor::vector(vec![3.0, -0.5, 0.0]))].into();
        let mut opt = optimizer("adam").unwrap();
        opt.step(&mut p, &g, 0.1).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.9).abs() < 1e-8);
        assert!((x[1] + 0.9).abs() < 1e-8);
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn unknown_optimizer_named() {
        match optimizer("rmsprop") {
            Err(Error::UnknownName { name, .. }) => assert_eq!(name, "rmsprop"),
            _ => panic!(),
        }
    }
}
