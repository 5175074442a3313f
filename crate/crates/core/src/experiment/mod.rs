//! Experiment orchestration: a task family with its initializations,
//! fine-tuning runs, the comparison grid and the gradient oracle.

mod gradcheck;
mod grid;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::eval::{score, zero_shot_eval, BleuConfig, MetricsLog, MetricsRecord};
use crate::learner::{fine_tune, LearnConfig};
use crate::metalearn::{meta_train, multilingual_train, transfer_init, MetaConfig, Trained};
use crate::model::{init_params, FineTuneStrategy, ModelConfig, Translator};
use crate::params::ParamSet;
use crate::tasks::{generate_family, Family, SyntheticFamilySpec, Task};
use crate::ulr::{SimilaritySign, DEFAULT_TAU};

pub use gradcheck::{random_model_gradcheck, ModelCheck};
pub use grid::{
    checkpoint_path, mean_std, run_grid, summarize, summary_table, write_summary_csv, CellResult,
    CurveRecord, GridReport, SummaryRow, ZERO_SHOT,
};

/// Where the initialization `θ⁰` of a fine-tuning run comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Random,
    Transfer,
    Multilingual,
    Meta,
}

impl InitKind {
    pub const ALL: [InitKind; 4] = [Self::Random, Self::Transfer, Self::Multilingual, Self::Meta];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Transfer => "transfer",
            Self::Multilingual => "multilingual",
            Self::Meta => "meta",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "initialization",
                name: s.to_string(),
                known: "random, transfer, multilingual, meta".into(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UlrConfig {
    /// Universal slots `M`, capped by the pivot vocabulary.
    pub slots: usize,
    pub tau: f64,
    pub sign: SimilaritySign,
}

impl Default for UlrConfig {
    fn default() -> Self {
        UlrConfig {
            slots: 64,
            tau: DEFAULT_TAU,
            sign: SimilaritySign::Affinity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Family manifest; a family is generated from `synthetic` when unset.
    pub family: Option<PathBuf>,
    pub synthetic: SyntheticFamilySpec,
    pub model: ModelConfig,
    pub ulr: UlrConfig,
    pub meta: MetaConfig,
    /// Fine-tuning on target tasks.
    pub learn: LearnConfig,
    pub bleu: BleuConfig,
    /// Source tasks used for pretraining; all of the family's when empty.
    pub sources: Vec<String>,
    /// Tasks fine-tuned and evaluated; all targets when empty.
    pub targets: Vec<String>,
    /// Source for transfer; the one with the best validation score when unset.
    pub transfer_source: Option<String>,
    pub inits: Vec<InitKind>,
    /// Target-token budgets of the fine-tuning sets.
    pub budgets: Vec<usize>,
    pub strategies: Vec<FineTuneStrategy>,
    pub seeds: Vec<u64>,
    /// Also evaluate every initialization without fine-tuning.
    pub zero_shot: bool,
    /// Read initializations from here instead of pretraining them.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            family: None,
            synthetic: SyntheticFamilySpec::default(),
            model: ModelConfig {
                d_model: 16,
                n_layer: 1,
                n_head: 2,
                d_ff: 32,
                max_len: 24,
                dropout: 0.0,
            },
            ulr: UlrConfig::default(),
            meta: MetaConfig {
                meta_lr: 3e-3,
                outer_optimizer: "adam".into(),
                inner_lr: 1e-3,
                inner_optimizer: "adam".into(),
                total_updates: 2000,
                eval_every: 200,
                d_size: 256,
                dprime_size: 256,
                validation_learn: LearnConfig {
                    max_steps: 60,
                    eval_every: 20,
                    ..LearnConfig::default()
                },
                ..MetaConfig::default()
            },
            learn: LearnConfig::default(),
            bleu: BleuConfig::default(),
            sources: Vec::new(),
            targets: Vec::new(),
            transfer_source: None,
            inits: InitKind::ALL.to_vec(),
            budgets: vec![16_000],
            strategies: vec![FineTuneStrategy::All],
            seeds: vec![1],
            zero_shot: true,
            checkpoint_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.meta.validate()?;
        self.learn.validate()?;
        if self.ulr.slots == 0 || !(self.ulr.tau > 0.0) {
            return Err(Error::InvalidArgument("ulr.slots and ulr.tau must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// A loaded family together with the configuration that runs on it.
pub struct Lab {
    pub config: ExperimentConfig,
    pub family: Family,
}

fn pick<'a>(family: &'a Family, names: &[String], default: &'a [Task]) -> Result<Vec<&'a Task>> {
    if names.is_empty() {
        Ok(default.iter().collect())
    } else {
        names.iter().map(|n| family.task(n)).collect()
    }
}

/// Result of fine-tuning one initialization on one target task.
pub struct FineTuned {
    pub params: ParamSet,
    pub test_bleu: f64,
}

impl Lab {
    /// Loads the configured family, or generates the synthetic one.
    pub fn open(config: ExperimentConfig) -> Result<Lab> {
        config.validate()?;
        let family = match &config.family {
            Some(path) => Family::load(path, config.model.max_len)?,
            None => Family::from_generated(&generate_family(&config.synthetic)?, config.model.max_len)?,
        };
        Self::with_family(config, family)
    }

    pub fn with_family(config: ExperimentConfig, family: Family) -> Result<Lab> {
        config.validate()?;
        let lab = Lab { config, family };
        lab.sources()?;
        lab.targets()?;
        lab.validation()?;
        Ok(lab)
    }

    pub fn sources(&self) -> Result<Vec<&Task>> {
        let s = pick(&self.family, &self.config.sources, &self.family.sources)?;
        if s.is_empty() {
            return Err(Error::InvalidArgument("no source tasks".into()));
        }
        Ok(s)
    }

    pub fn targets(&self) -> Result<Vec<&Task>> {
        pick(&self.family, &self.config.targets, &self.family.targets)
    }

    /// The task scored during pretraining.
    pub fn validation(&self) -> Result<&Task> {
        match &self.config.meta.validation_task {
            Some(name) => self.family.task(name),
            None => self
                .family
                .targets
                .first()
                .ok_or_else(|| Error::InvalidArgument("the family has no target task to validate on".into())),
        }
    }

    fn checkpoint(&self, init: InitKind, seed: u64, source: Option<String>, trained: Option<Trained>, base: Checkpoint) -> Result<Checkpoint> {
        let (params, curve) = match trained {
            Some(t) => (t.params, t.curve),
            None => (base.params, Vec::new()),
        };
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            config_hash: self.config.hash()?,
            init: init.to_string(),
            seed,
            source,
            model: base.model,
            ulr: base.ulr,
            params,
            curve,
        })
    }

    /// The random initialization of `seed`: ULR from the pivot vectors,
    /// Xavier weights, zero deltas for every language.
    pub fn random_init(&self, seed: u64) -> Result<Checkpoint> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ulr = self
            .family
            .ulr_init(c.ulr.slots, c.model.d_model, c.ulr.tau, c.ulr.sign, &mut rng)?;
        let params = init_params(&c.model, &ulr, self.family.target_vocab.len(), &self.family.lexicons(), &mut rng)?;
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            config_hash: c.hash()?,
            init: InitKind::Random.to_string(),
            seed,
            source: None,
            model: c.model.clone(),
            ulr,
            params,
            curve: Vec::new(),
        })
    }

    fn meta_config(&self, seed: u64) -> MetaConfig {
        MetaConfig {
            seed,
            ..self.config.meta.clone()
        }
    }

    /// Trains the initialization `init` from the random one of `seed`.
    pub fn pretrain(&self, init: InitKind, seed: u64, log: &mut MetricsLog) -> Result<Checkpoint> {
        let base = self.random_init(seed)?;
        let model = Translator::new(&base.model, &base.ulr);
        let cfg = self.meta_config(seed);
        let val = self.validation()?;
        let sources = self.sources()?;
        let run = |tag: &str| format!("{tag}-seed{seed}");
        match init {
            InitKind::Random => self.checkpoint(init, seed, None, None, base),
            InitKind::Meta => {
                let t = meta_train(model, &base.params, &sources, Some(val), &cfg, log, &run("meta"))?;
                self.checkpoint(init, seed, None, Some(t), base)
            }
            InitKind::Multilingual => {
                let t = multilingual_train(model, &base.params, &sources, Some(val), &cfg, log, &run("multilingual"))?;
                self.checkpoint(init, seed, None, Some(t), base)
            }
            InitKind::Transfer => {
                let candidates: Vec<&Task> = match &self.config.transfer_source {
                    Some(name) => vec![self.family.task(name)?],
                    None => sources,
                };
                let mut best: Option<(f64, String, Trained)> = None;
                for src in candidates {
                    let t = transfer_init(model, &base.params, src, Some(val), &cfg, log, &run(&format!("transfer[{}]", src.name)))?;
                    let score = t.curve.iter().map(|c| c.bleu).fold(f64::NEG_INFINITY, f64::max);
                    log::info!("transfer from {}: best validation BLEU {score:.2}", src.name);
                    if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                        best = Some((score, src.name.clone(), t));
                    }
                }
                let (_, name, t) = best.expect("at least one transfer source");
                self.checkpoint(init, seed, Some(name), Some(t), base)
            }
        }
    }

    /// Loads `init` for `seed` from the checkpoint directory when one is
    /// configured, and pretrains it otherwise.
    pub fn initialization(&self, init: InitKind, seed: u64, log: &mut MetricsLog) -> Result<Checkpoint> {
        let Some(dir) = &self.config.checkpoint_dir else {
            return self.pretrain(init, seed, log);
        };
        let path = checkpoint_path(dir, init, seed);
        if !path.exists() {
            if init == InitKind::Random {
                return self.random_init(seed);
            }
            return Err(Error::InvalidArgument(format!(
                "missing checkpoint for the {init} initialization (seed {seed}): {}",
                path.display()
            )));
        }
        let ck = Checkpoint::load(&path)?;
        self.check_compatible(&ck, &path)?;
        Ok(ck)
    }

    pub fn check_compatible(&self, ck: &Checkpoint, path: &Path) -> Result<()> {
        if ck.model != self.config.model {
            return Err(Error::InvalidArgument(format!(
                "{}: model configuration differs from the experiment's",
                path.display()
            )));
        }
        if ck.ulr.query_dim() != self.family.pivot.query_dim() {
            return Err(Error::InvalidArgument(format!(
                "{}: ULR keys have width {} but the family's vectors have {}",
                path.display(),
                ck.ulr.query_dim(),
                self.family.pivot.query_dim()
            )));
        }
        Ok(())
    }

    /// Fine-tunes `ck` on the first `budget` target tokens of `task` (a
    /// seed-dependent subsample) and scores the test split.
    #[allow(clippy::too_many_arguments)]
    pub fn fine_tune(
        &self,
        ck: &Checkpoint,
        task: &Task,
        budget: usize,
        strategy: FineTuneStrategy,
        seed: u64,
        log: &mut MetricsLog,
        run: &str,
    ) -> Result<FineTuned> {
        let start = std::time::Instant::now();
        let learn = LearnConfig {
            strategy,
            seed,
            ..self.config.learn.clone()
        };
        let sub = task.subsample(budget, seed)?;
        let model = Translator::new(&ck.model, &ck.ulr);
        let tuned = fine_tune(model, &ck.params, &sub, &learn)?;
        let record = |step, split: &str, loss, bleu| MetricsRecord {
            run: run.to_string(),
            seed,
            step,
            task: task.name.clone(),
            split: split.to_string(),
            loss,
            bleu,
            budget: Some(budget),
            wall_clock: start.elapsed().as_secs_f64(),
            init: Some(ck.init.clone()),
            strategy: Some(strategy.to_string()),
        };
        for r in tuned.history.iter().filter(|r| r.dev_loss.is_some()) {
            log.push(record(r.step, "dev", r.dev_loss, None))?;
        }
        let test_bleu = score(&model, &tuned.params, &sub.lexicon, &sub.test, self.config.bleu)?;
        log.push(record(tuned.best_step, "test", None, Some(test_bleu)))?;
        Ok(FineTuned {
            params: tuned.params,
            test_bleu,
        })
    }

    /// Test BLEU of `ck` on `task` with no fine-tuning.
    pub fn zero_shot(&self, ck: &Checkpoint, task: &Task, log: &mut MetricsLog, run: &str) -> Result<f64> {
        let start = std::time::Instant::now();
        let model = Translator::new(&ck.model, &ck.ulr);
        let bleu = zero_shot_eval(&model, &ck.params, task, self.config.bleu)?;
        log.push(MetricsRecord {
            run: run.to_string(),
            seed: ck.seed,
            step: 0,
            task: task.name.clone(),
            split: "test".into(),
            loss: None,
            bleu: Some(bleu),
            budget: Some(0),
            wall_clock: start.elapsed().as_secs_f64(),
            init: Some(ck.init.clone()),
            strategy: Some(ZERO_SHOT.into()),
        })?;
        Ok(bleu)
    }
}

#[cfg(test)]
mod tests;
