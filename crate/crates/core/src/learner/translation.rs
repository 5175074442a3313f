use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{learn, LearnConfig, Learned, Objective};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::model::{partition_mask, SentencePair, Translator};
use crate::params::{ParamSet, ParamVars, Partition, TrainableSet};
use crate::tasks::Task;
use crate::ulr::{delta_name, set_stage, LanguageLexicon, Stage};

/// Sentence pairs of one task, with the dropout seed used for this batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Index into the objective's lexicons.
    pub task: usize,
    pub pairs: Vec<SentencePair>,
    pub dropout_seed: Option<u64>,
}

impl Batch {
    /// Predicted tokens, `<eos>` included.
    pub fn tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.target.len() + 1).sum()
    }
}

/// Mean per-token negative log-likelihood of a translation model.
pub struct TranslationObjective<'a> {
    pub model: Translator<'a>,
    pub lexicons: Vec<&'a LanguageLexicon>,
}

impl Objective<Batch> for TranslationObjective<'_> {
    fn loss(&self, g: &mut Graph, vars: &ParamVars, data: &Batch) -> Result<Var> {
        let lex = self.lexicons.get(data.task).ok_or_else(|| {
            crate::Error::InvalidArgument(format!("no lexicon for task index {}", data.task))
        })?;
        self.model.loss(g, vars, lex, &data.pairs, data.dropout_seed)
    }

    fn weight(&self, data: &Batch) -> f64 {
        data.tokens() as f64
    }
}

/// Groups pair indices, in the given order, into batches of at most
/// `batch_tokens` target tokens (a longer single pair gets its own batch).
pub fn batches_by_tokens(pairs: &[SentencePair], order: &[usize], batch_tokens: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for &i in order {
        let n = pairs[i].target.len() + 1;
        if !cur.is_empty() && tokens + n > batch_tokens {
            out.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Endless shuffled epochs over one task's pairs.
pub struct BatchStream<'a> {
    task: usize,
    pairs: &'a [SentencePair],
    batch_tokens: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
    dropout: bool,
}

impl<'a> BatchStream<'a> {
    pub fn new(task: usize, pairs: &'a [SentencePair], batch_tokens: usize, seed: u64, dropout: bool) -> Self {
        BatchStream {
            task,
            pairs,
            batch_tokens,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
            dropout,
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.queue.is_empty() {
            let mut order: Vec<usize> = (0..self.pairs.len()).collect();
            order.shuffle(&mut self.rng);
            self.queue = batches_by_tokens(self.pairs, &order, self.batch_tokens);
            self.queue.reverse();
        }
        let idx = self.queue.pop().unwrap_or_default();
        Batch {
            task: self.task,
            pairs: idx.into_iter().map(|i| self.pairs[i].clone()).collect(),
            dropout_seed: self.dropout.then(|| self.rng.random()),
        }
    }
}

/// Fixed, dropout-free batches over `pairs` in order.
pub fn eval_batches(task: usize, pairs: &[SentencePair], batch_tokens: usize) -> Vec<Batch> {
    let order: Vec<usize> = (0..pairs.len()).collect();
    batches_by_tokens(pairs, &order, batch_tokens)
        .into_iter()
        .map(|idx| Batch {
            task,
            pairs: idx.into_iter().map(|i| pairs[i].clone()).collect(),
            dropout_seed: None,
        })
        .collect()
}

/// Names fine-tuning on `language` may change under `cfg.strategy`.
pub fn fine_tune_trainable(params: &ParamSet, language: &str, cfg: &LearnConfig) -> TrainableSet {
    let stage = set_stage(params, &Stage::LanguageSpecific(language.to_string()));
    partition_mask(params, cfg.strategy)
        .intersection(&stage)
        .cloned()
        .collect()
}

/// Language-specific learning on `task`: early-stopped on its dev split,
/// with the task's delta table added (zero) if `theta0` lacks one.
pub fn fine_tune(model: Translator<'_>, theta0: &ParamSet, task: &Task, cfg: &LearnConfig) -> Result<Learned> {
    let mut start = theta0.clone();
    let delta = delta_name(&task.name);
    if !start.contains(&delta) {
        start.insert(delta, Partition::Embedding, task.lexicon.zero_delta(model.config.d_model));
    }
    let trainable = fine_tune_trainable(&start, &task.name, cfg);
    let obj = TranslationObjective {
        model,
        lexicons: vec![&task.lexicon],
    };
    let mut stream = BatchStream::new(0, &task.train, cfg.batch_tokens, cfg.seed, model.config.dropout > 0.0);
    let dev = eval_batches(0, &task.dev, cfg.batch_tokens.max(1));
    learn(&obj, &start, &trainable, &mut |_| Ok(stream.next_batch()), &dev, cfg)
}
