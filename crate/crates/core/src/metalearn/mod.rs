//! The outer loop over source tasks: episode sampling, meta-gradient
//! estimation and aggregation, plus the multilingual and transfer baselines
//! trained under the same budget.

mod estimators;

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{score, BleuConfig, MetricsLog, MetricsRecord};
use crate::learner::{fine_tune, gradient, optimizer, Batch, LearnConfig, TranslationObjective};
use crate::model::{SentencePair, Translator};
use crate::params::{grad_accumulate, GradMap, ParamSet, TrainableSet};
use crate::tasks::Task;
use crate::ulr::{set_stage, Stage};

pub use estimators::{
    estimator, Exact, FirstOrder, FirstOrderAdam, Hvp, MetaGradient, MetaGradientEstimator, MetaSets,
    DEFAULT_EXACT_PARAM_LIMIT, ESTIMATORS,
};

/// How episode gradients of one outer step are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Outer rate `η′`.
    pub meta_lr: f64,
    /// Inner rate `η`.
    pub inner_lr: f64,
    pub episodes_per_update: usize,
    pub estimator: String,
    /// Update rule of the simulated inner step: `sgd`, or `adam` from a
    /// fresh state (first-order estimator only).
    pub inner_optimizer: String,
    /// Finite-difference step of the `hvp` estimator.
    pub nu: f64,
    pub total_updates: usize,
    /// Target-token budget of the simulation subset `D`.
    pub d_size: usize,
    /// Target-token budget of the evaluation subset `D′`.
    pub dprime_size: usize,
    pub aggregate: Aggregate,
    pub outer_optimizer: String,
    pub exact_param_limit: usize,
    /// Outer steps between validation runs.
    pub eval_every: usize,
    /// Task scored between outer steps; the first target when unset.
    pub validation_task: Option<String>,
    /// Train-split budget of the validation task.
    pub validation_budget: usize,
    /// Fine-tuning used for validation.
    pub validation_learn: LearnConfig,
    pub bleu: BleuConfig,
    /// Abort when the mean episode loss exceeds this.
    pub divergence_loss: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            meta_lr: 0.1,
            inner_lr: 0.1,
            episodes_per_update: 1,
            estimator: "first_order".into(),
            inner_optimizer: "sgd".into(),
            nu: 1e-4,
            total_updates: 1000,
            d_size: 512,
            dprime_size: 512,
            aggregate: Aggregate::Sum,
            outer_optimizer: "sgd".into(),
            exact_param_limit: DEFAULT_EXACT_PARAM_LIMIT,
            eval_every: 100,
            validation_task: None,
            validation_budget: 16_000,
            validation_learn: LearnConfig::default(),
            bleu: BleuConfig::default(),
            divergence_loss: 1e3,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.meta_lr > 0.0) || !(self.inner_lr > 0.0) {
            return bad("meta_lr and inner_lr must be > 0".into());
        }
        if self.episodes_per_update == 0 || self.eval_every == 0 {
            return bad("episodes_per_update and eval_every must be at least 1".into());
        }
        if self.d_size == 0 || self.dprime_size == 0 {
            return bad("episode token budgets must be positive".into());
        }
        if self.estimator == "hvp" && !(self.nu > 0.0) {
            return bad(format!("nu must be > 0, got {}", self.nu));
        }
        estimator::<()>(&self.estimator, &self.inner_optimizer, self.nu, self.exact_param_limit)?;
        optimizer(&self.outer_optimizer)?;
        self.validation_learn.validate()
    }
}

/// One sampled source task with two independently drawn subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: usize,
    pub d: Batch,
    pub dprime: Batch,
}

/// Pairs drawn uniformly without replacement until their target tokens
/// reach `budget`; with replacement (and a warning) when the whole set is
/// smaller than the budget.
pub fn sample_subset(pairs: &[SentencePair], budget: usize, rng: &mut impl Rng) -> Vec<SentencePair> {
    let total: usize = pairs.iter().map(|p| p.target.len()).sum();
    let replace = total < budget;
    if replace {
        log::warn!("task holds {total} target tokens, below the episode budget {budget}; sampling with replacement");
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut tokens = 0;
    while tokens < budget {
        let i = rng.random_range(0..pairs.len());
        if !replace && !seen.insert(i) {
            continue;
        }
        tokens += pairs[i].target.len();
        out.push(pairs[i].clone());
    }
    out
}

/// Draws a task uniformly, then `D` and `D′` independently from its train split.
pub fn sample_episode(sources: &[&Task], rng: &mut impl Rng, cfg: &MetaConfig, dropout: bool) -> Result<Episode> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no source tasks".into()));
    }
    let k = rng.random_range(0..sources.len());
    let train = &sources[k].train;
    if train.is_empty() {
        return Err(Error::InvalidArgument(format!("task {} has no train pairs", sources[k].name)));
    }
    let d = Batch {
        task: k,
        pairs: sample_subset(train, cfg.d_size, rng),
        dropout_seed: dropout.then(|| rng.random()),
    };
    let dprime = Batch {
        task: k,
        pairs: sample_subset(train, cfg.dprime_size, rng),
        dropout_seed: dropout.then(|| rng.random()),
    };
    Ok(Episode { task: k, d, dprime })
}

/// Fine-tunes a copy of `θ` on the validation task and scores its dev split.
pub struct Validator<'a> {
    pub model: Translator<'a>,
    pub task: Task,
    pub learn: LearnConfig,
    pub bleu: BleuConfig,
}

impl<'a> Validator<'a> {
    pub fn new(model: Translator<'a>, task: &Task, cfg: &MetaConfig) -> Result<Self> {
        Ok(Validator {
            model,
            task: task.subsample(cfg.validation_budget, cfg.seed)?,
            learn: LearnConfig {
                seed: cfg.seed,
                ..cfg.validation_learn.clone()
            },
            bleu: cfg.bleu,
        })
    }

    /// `(dev BLEU, best dev loss)` after fine-tuning from `theta`.
    pub fn run(&self, theta: &ParamSet) -> Result<(f64, Option<f64>)> {
        let tuned = fine_tune(self.model, theta, &self.task, &self.learn)?;
        let dev_loss = tuned
            .history
            .iter()
            .filter_map(|r| r.dev_loss)
            .min_by(f64::total_cmp);
        let bleu = score(&self.model, &tuned.params, &self.task.lexicon, &self.task.dev, self.bleu)?;
        Ok((bleu, dev_loss))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub bleu: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    /// Parameters at the best validation score (the last ones without validation).
    pub params: ParamSet,
    pub last: ParamSet,
    pub best_step: usize,
    pub curve: Vec<CurvePoint>,
}

/// Gradient of one outer step: the aggregate direction and the mean loss.
type StepFn<'f> = dyn FnMut(&ParamSet, &TrainableSet, &mut ChaCha8Rng, usize) -> Result<(GradMap, f64)> + 'f;

struct RunInfo<'a> {
    run: &'a str,
    task: String,
}

fn outer_loop(
    theta_init: &ParamSet,
    cfg: &MetaConfig,
    step_fn: &mut StepFn<'_>,
    validator: Option<&Validator<'_>>,
    log: &mut MetricsLog,
    info: RunInfo<'_>,
) -> Result<Trained> {
    cfg.validate()?;
    let start = Instant::now();
    let trainable = set_stage(theta_init, &Stage::Meta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = optimizer(&cfg.outer_optimizer)?;
    let mut theta = theta_init.clone();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let record = |step: usize, split: &str, task: &str, loss, bleu, budget| MetricsRecord {
        run: info.run.to_string(),
        seed: cfg.seed,
        step,
        task: task.to_string(),
        split: split.to_string(),
        loss,
        bleu,
        budget,
        wall_clock: start.elapsed().as_secs_f64(),
        init: None,
        strategy: None,
    };
    let mut validate = |step: usize, theta: &ParamSet, log: &mut MetricsLog| -> Result<()> {
        let Some(v) = validator else { return Ok(()) };
        let (bleu, loss) = v.run(theta)?;
        log.push(record(step, "dev", &v.task.name, loss, Some(bleu), Some(cfg.validation_budget)))?;
        curve.push(CurvePoint { step, bleu });
        if best.as_ref().is_none_or(|(b, _, _)| bleu > *b) {
            best = Some((bleu, step, theta.clone()));
        }
        Ok(())
    };
    validate(0, &theta, log)?;
    let mut window = (0.0, 0usize);
    for step in 1..=cfg.total_updates {
        let (grads, loss) = step_fn(&theta, &trainable, &mut rng, step)?;
        if !loss.is_finite() || loss > cfg.divergence_loss {
            log.push(record(step, "train", &info.task, Some(loss), None, None))?;
            return Err(Error::Diverged {
                step,
                reason: format!("episode loss {loss} exceeds {}", cfg.divergence_loss),
            });
        }
        opt.step(&mut theta, &grads, cfg.meta_lr)?;
        if !theta.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameters after the outer update".into(),
            });
        }
        window.0 += loss;
        window.1 += 1;
        if step % cfg.eval_every == 0 || step == cfg.total_updates {
            log.push(record(step, "train", &info.task, Some(window.0 / window.1 as f64), None, None))?;
            window = (0.0, 0);
            validate(step, &theta, log)?;
        }
    }
    let (params, best_step) = match best {
        Some((_, s, p)) => (p, s),
        None => (theta.clone(), cfg.total_updates),
    };
    Ok(Trained {
        params,
        last: theta,
        best_step,
        curve,
    })
}

fn numerical_context(e: Error, step: usize, what: String) -> Error {
    match e {
        Error::NonFinite(v) => Error::Diverged {
            step,
            reason: format!("{what}: non-finite {v}"),
        },
        e => e,
    }
}

fn finish(acc: GradMap, loss: f64, cfg: &MetaConfig) -> (GradMap, f64) {
    let n = cfg.episodes_per_update as f64;
    let grads = match cfg.aggregate {
        Aggregate::Sum => acc,
        Aggregate::Mean => acc.into_iter().map(|(k, t)| (k, t.scaled(1.0 / n))).collect(),
    };
    (grads, loss / n)
}

/// Meta-learns an initialization over `sources`. Every outer step sums (or
/// averages) the meta-gradients of `episodes_per_update` episodes and takes
/// one step of the outer optimizer. The simulated inner step is
/// language-specific learning (network and the episode language's delta,
/// universal embeddings fixed); the adapted parameters are discarded, so
/// delta tables stay as they were.
pub fn meta_train(
    model: Translator<'_>,
    theta_init: &ParamSet,
    sources: &[&Task],
    validation: Option<&Task>,
    cfg: &MetaConfig,
    log: &mut MetricsLog,
    run: &str,
) -> Result<Trained> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("meta-training needs source tasks".into()));
    }
    check_validation(sources, validation)?;
    let est = estimator::<Batch>(&cfg.estimator, &cfg.inner_optimizer, cfg.nu, cfg.exact_param_limit)?;
    let obj = TranslationObjective {
        model,
        lexicons: sources.iter().map(|t| &t.lexicon).collect(),
    };
    let dropout = model.config.dropout > 0.0;
    let meta_names = set_stage(theta_init, &Stage::Meta);
    let sets: Vec<MetaSets> = sources
        .iter()
        .map(|t| MetaSets {
            inner: set_stage(theta_init, &Stage::LanguageSpecific(t.name.clone())),
            outer: meta_names.clone(),
        })
        .collect();
    let mut step_fn = |theta: &ParamSet, _: &TrainableSet, rng: &mut ChaCha8Rng, step: usize| {
        let mut acc = GradMap::new();
        let mut loss = 0.0;
        for e in 0..cfg.episodes_per_update {
            let ep = sample_episode(sources, rng, cfg, dropout)?;
            let mg = est
                .meta_gradient(&obj, theta, &sets[ep.task], &ep.d, &ep.dprime, cfg.inner_lr)
                .map_err(|err| {
                    numerical_context(err, step, format!("episode {e} on {}", sources[ep.task].name))
                })?;
            grad_accumulate(&mut acc, &mg.grads)?;
            loss += mg.outer_loss;
        }
        Ok(finish(acc, loss, cfg))
    };
    let validator = validation.map(|t| Validator::new(model, t, cfg)).transpose()?;
    outer_loop(
        theta_init,
        cfg,
        &mut step_fn,
        validator.as_ref(),
        log,
        RunInfo {
            run,
            task: "meta".into(),
        },
    )
}

/// Joint training on the union of `sources` under the meta-training budget:
/// every step draws `episodes_per_update` tasks uniformly and one batch of
/// `d_size + dprime_size` target tokens from each.
pub fn multilingual_train(
    model: Translator<'_>,
    theta_init: &ParamSet,
    sources: &[&Task],
    validation: Option<&Task>,
    cfg: &MetaConfig,
    log: &mut MetricsLog,
    run: &str,
) -> Result<Trained> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("multilingual training needs source tasks".into()));
    }
    check_validation(sources, validation)?;
    let obj = TranslationObjective {
        model,
        lexicons: sources.iter().map(|t| &t.lexicon).collect(),
    };
    let dropout = model.config.dropout > 0.0;
    let mut step_fn = |theta: &ParamSet, trainable: &TrainableSet, rng: &mut ChaCha8Rng, step: usize| {
        let mut acc = GradMap::new();
        let mut loss = 0.0;
        for e in 0..cfg.episodes_per_update {
            let k = rng.random_range(0..sources.len());
            let batch = Batch {
                task: k,
                pairs: sample_subset(&sources[k].train, cfg.d_size + cfg.dprime_size, rng),
                dropout_seed: dropout.then(|| rng.random()),
            };
            let (l, g) = gradient(&obj, theta, trainable, &batch)
                .map_err(|err| numerical_context(err, step, format!("batch {e} on {}", sources[k].name)))?;
            grad_accumulate(&mut acc, &g)?;
            loss += l;
        }
        Ok(finish(acc, loss, cfg))
    };
    let validator = validation.map(|t| Validator::new(model, t, cfg)).transpose()?;
    outer_loop(
        theta_init,
        cfg,
        &mut step_fn,
        validator.as_ref(),
        log,
        RunInfo {
            run,
            task: "multilingual".into(),
        },
    )
}

/// Pretraining on a single source task.
pub fn transfer_init(
    model: Translator<'_>,
    theta_init: &ParamSet,
    source: &Task,
    validation: Option<&Task>,
    cfg: &MetaConfig,
    log: &mut MetricsLog,
    run: &str,
) -> Result<Trained> {
    multilingual_train(model, theta_init, &[source], validation, cfg, log, run)
}

fn check_validation(sources: &[&Task], validation: Option<&Task>) -> Result<()> {
    if let Some(v) = validation {
        if sources.iter().any(|s| s.name == v.name) {
            return Err(Error::InvalidArgument(format!(
                "validation task {} is also a source",
                v.name
            )));
        }
    }
    Ok(())
}
