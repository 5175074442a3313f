use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, Graph, Tensor};
use crate::error::Result;
use crate::model::vocab::NUM_RESERVED;
use crate::model::{init_params, ModelConfig, SentencePair, Translator};
use crate::params::ParamVars;
use crate::ulr::{LanguageLexicon, SimilaritySign, UlrState, DEFAULT_TAU};

#[derive(Clone, Debug, Serialize)]
pub struct ModelCheck {
    pub index: usize,
    pub params: usize,
    pub config: ModelConfig,
    pub worst_param: String,
    pub worst_error: f64,
    pub passed: bool,
}

fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let n_head = rng.random_range(1..=2);
    ModelConfig {
        d_model: n_head * rng.random_range(2..=3),
        n_layer: rng.random_range(1..=2),
        n_head,
        d_ff: rng.random_range(3..=8),
        max_len: 6,
        dropout: 0.0,
    }
}

fn random_sentence(rng: &mut impl Rng, vocab: usize) -> Vec<usize> {
    let len = rng.random_range(1..=4);
    (0..len).map(|_| rng.random_range(NUM_RESERVED..vocab)).collect()
}

/// Checks the full translation loss of `count` randomly shaped small
/// translators (at most `max_params` scalars each) against central
/// differences.
pub fn random_model_gradcheck(
    count: usize,
    max_params: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<Vec<ModelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let cfg = random_config(&mut rng);
        let src_vocab = rng.random_range(NUM_RESERVED + 2..NUM_RESERVED + 6);
        let tgt_vocab = rng.random_range(NUM_RESERVED + 2..NUM_RESERVED + 6);
        let dq = rng.random_range(2..=4);
        let q: Vec<f64> = (0..src_vocab * dq).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lex = LanguageLexicon::new("src", Tensor::new(vec![src_vocab, dq], q)?)?;
        let slots = rng.random_range(2..=src_vocab.min(5));
        let ulr = UlrState::from_pivot(&lex.query, slots, cfg.d_model, DEFAULT_TAU, SimilaritySign::Affinity, &mut rng)?;
        let mut params = init_params(&cfg, &ulr, tgt_vocab, &[&lex], &mut rng)?;
        for (name, _) in params.clone().iter() {
            // random, non-zero deltas and biases so every path carries gradient
            params
                .get_mut(name)?
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let n = params.num_scalars(None);
        if n > max_params {
            continue;
        }
        let pairs: Vec<SentencePair> = (0..rng.random_range(1..=3))
            .map(|_| SentencePair::new(random_sentence(&mut rng, src_vocab), random_sentence(&mut rng, tgt_vocab)))
            .collect();
        let model = Translator::new(&cfg, &ulr);
        let loss = |g: &mut Graph, vars: &ParamVars| model.loss(g, vars, &lex, &pairs, None);
        let report = grad_check(loss, &params, step, tolerance)?;
        let (worst_param, worst_error) = report
            .worst()
            .map(|(n, e)| (n.to_string(), e))
            .unwrap_or_default();
        out.push(ModelCheck {
            index: out.len(),
            params: n,
            config: cfg.clone(),
            worst_param,
            worst_error,
            passed: report.passed(),
        });
    }
    Ok(out)
}
