use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::TARGET_EMBEDDING;
use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::params::{ParamSet, Partition};
use crate::ulr::{LanguageLexicon, SimilaritySign, UlrState, DEFAULT_TAU};

pub(crate) struct Fixture {
    pub cfg: ModelConfig,
    pub ulr: UlrState,
    pub lex: LanguageLexicon,
    pub params: ParamSet,
}

pub(crate) fn fixture(cfg: ModelConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let q: Vec<f64> = (0..src_vocab * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lex = LanguageLexicon::new("xx", Tensor::new(vec![src_vocab, d], q).unwrap()).unwrap();
    let slots = src_vocab.min(8);
    let ulr = UlrState::from_pivot(&lex.query, slots, d, DEFAULT_TAU, SimilaritySign::Affinity, &mut rng)
        .unwrap();
    let params = init_params(&cfg, &ulr, tgt_vocab, &[&lex], &mut rng).unwrap();
    Fixture { cfg, ulr, lex, params }
}

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layer: 1,
        n_head: 2,
        d_ff: 16,
        max_len: 10,
        dropout: 0.0,
    }
}

impl Fixture {
    fn model(&self) -> Translator<'_> {
        Translator::new(&self.cfg, &self.ulr)
    }

    fn loss(&self, pairs: &[SentencePair]) -> f64 {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, &self.params.all_names());
        let l = self.model().loss(&mut g, &vars, &self.lex, pairs, None).unwrap();
        g.value(l).item()
    }

    fn grads(&self, pairs: &[SentencePair]) -> crate::params::GradMap {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, &self.params.all_names());
        let l = self.model().loss(&mut g, &vars, &self.lex, pairs, None).unwrap();
        g.backward(l).unwrap().into_map()
    }

    fn adam_fit(&mut self, pairs: &[SentencePair], steps: usize, lr: f64) -> f64 {
        let names = self.params.all_names();
        let mut m: crate::params::GradMap = Default::default();
        let mut v: crate::params::GradMap = Default::default();
        let mut last = f64::INFINITY;
        for t in 1..=steps {
            let mut g = Graph::new();
            let vars = self.params.register(&mut g, &names);
            let l = self.model().loss(&mut g, &vars, &self.lex, pairs, None).unwrap();
            last = g.value(l).item();
            let grads = g.backward(l).unwrap();
            for (name, gr) in grads.iter() {
                let mm = m.entry(name.clone()).or_insert_with(|| Tensor::zeros(gr.shape()));
                let vv = v.entry(name.clone()).or_insert_with(|| Tensor::zeros(gr.shape()));
                let p = self.params.get_mut(name).unwrap();
                let b1 = 1.0 - 0.9f64.powi(t as i32);
                let b2 = 1.0 - 0.999f64.powi(t as i32);
                for i in 0..gr.numel() {
                    let gi = gr.data()[i];
                    mm.data_mut()[i] = 0.9 * mm.data()[i] + 0.1 * gi;
                    vv.data_mut()[i] = 0.999 * vv.data()[i] + 0.001 * gi * gi;
                    p.data_mut()[i] -=
                        lr * (mm.data()[i] / b1) / ((vv.data()[i] / b2).sqrt() + 1e-8);
                }
            }
        }
        last
    }
}

fn pair(s: &[usize], t: &[usize]) -> SentencePair {
    SentencePair::new(s.to_vec(), t.to_vec())
}

#[test]
fn uniform_output_gives_log_v() {
    let mut f = fixture(small(), 12, 9, 1);
    *f.params.get_mut("dec.out.w").unwrap() = Tensor::zeros(&[8, 9]);
    let loss = f.loss(&[pair(&[4, 5], &[6])]);
    assert!((loss - (9f64).ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn copy_task_overfits() {
    let mut f = fixture(small(), 12, 12, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs: Vec<SentencePair> = (0..8)
        .map(|_| {
            let s: Vec<usize> = (0..3).map(|_| rng.random_range(4..12)).collect();
            pair(&s, &s)
        })
        .collect();
    let loss = f.adam_fit(&pairs, 50, 0.05);
    let loss = loss.min(f.loss(&pairs));
    assert!(loss < 0.1, "loss after 50 steps: {loss}");
}

#[test]
fn batch_loss_is_token_weighted_mean() {
    let f = fixture(small(), 12, 12, 3);
    let a = pair(&[4, 5, 6], &[7]);
    let b = pair(&[8], &[9, 10, 11, 4]);
    let la = f.loss(std::slice::from_ref(&a));
    let lb = f.loss(std::slice::from_ref(&b));
    let both = f.loss(&[a, b]);
    let expect = (la * 2.0 + lb * 5.0) / 7.0;
    assert!((both - expect).abs() < 1e-12, "{both} vs {expect}");
}

#[test]
fn batch_permutation_invariant() {
    let f = fixture(small(), 12, 12, 4);
    let pairs = vec![pair(&[4, 5], &[6, 7, 8]), pair(&[9], &[10]), pair(&[11, 4, 5, 6], &[7, 7])];
    let mut rev = pairs.clone();
    rev.reverse();
    assert!((f.loss(&pairs) - f.loss(&rev)).abs() < 1e-12);
}

#[test]
fn decoder_is_causal() {
    let f = fixture(small(), 12, 12, 5);
    let model = f.model();
    let logits = |tgt: Vec<usize>| {
        let mut g = Graph::new();
        let vars = f.params.register(&mut g, &Default::default());
        let enc = model.encode(&mut g, &vars, &f.lex, &[&[4, 5, 6]], None).unwrap();
        let l = model.decoder_logits(&mut g, &vars, &enc, &[tgt], None).unwrap();
        g.value(l).clone()
    };
    let base = logits(vec![1, 4, 5, 6, 7]);
    for t in 1..5 {
        let mut alt = vec![1, 4, 5, 6, 7];
        alt[t] = 11;
        let other = logits(alt);
        for pos in 0..t {
            assert_eq!(base.row(pos), other.row(pos), "position {pos} saw token {t}");
        }
        assert_ne!(base.row(t), other.row(t));
    }
}

#[test]
fn padding_gets_no_gradient() {
    let f = fixture(small(), 12, 12, 6);
    let grads = f.grads(&[pair(&[4, 5], &[6]), pair(&[7, 8, 9, 10], &[11, 4, 5])]);
    let pad = grads[TARGET_EMBEDDING].row(vocab::PAD).to_vec();
    assert!(pad.iter().all(|&v| v == 0.0), "{pad:?}");
    let delta = &grads["delta.xx"];
    assert!(delta.row(vocab::PAD).iter().all(|&v| v == 0.0));
    assert!(delta.row(4).iter().any(|&v| v != 0.0));
}

#[test]
fn dropout_zero_is_deterministic() {
    let f = fixture(small(), 12, 12, 7);
    let pairs = vec![pair(&[4, 5], &[6, 7])];
    assert_eq!(f.loss(&pairs).to_bits(), f.loss(&pairs).to_bits());
}

#[test]
fn dropout_seed_controls_mask() {
    let mut cfg = small();
    cfg.dropout = 0.3;
    let f = fixture(cfg, 12, 12, 8);
    let model = f.model();
    let run = |seed| {
        let mut g = Graph::new();
        let vars = f.params.register(&mut g, &Default::default());
        let l = model
            .loss(&mut g, &vars, &f.lex, &[pair(&[4, 5], &[6, 7])], Some(seed))
            .unwrap();
        g.value(l).item()
    };
    assert_eq!(run(1).to_bits(), run(1).to_bits());
    assert_ne!(run(1), run(2));
}

#[test]
fn sentence_errors() {
    let f = fixture(small(), 12, 12, 9);
    let model = f.model();
    let mut g = Graph::new();
    let vars = f.params.register(&mut g, &Default::default());
    let long = vec![4; 10];
    assert!(matches!(
        model.loss(&mut g, &vars, &f.lex, &[pair(&long, &[5])], None),
        Err(Error::SentenceTooLong { .. })
    ));
    assert!(matches!(
        model.loss(&mut g, &vars, &f.lex, &[pair(&[4], &[])], None),
        Err(Error::EmptySentence)
    ));
    assert!(matches!(
        model.loss(&mut g, &vars, &f.lex, &[pair(&[40], &[5])], None),
        Err(Error::TokenOutOfRange { .. })
    ));
    assert!(model.loss(&mut g, &vars, &f.lex, &[], None).is_err());
}

#[test]
fn decode_overfit_pair() {
    let mut f = fixture(small(), 8, 8, 10);
    let pairs = vec![pair(&[4, 5], &[6, 7])];
    f.adam_fit(&pairs, 60, 0.05);
    let out = greedy_decode(&f.model(), &f.params, &f.lex, &[&[4, 5]], 5).unwrap();
    assert_eq!(out, vec![vec![6, 7]]);
}

#[test]
fn decode_zero_steps_is_empty() {
    let f = fixture(small(), 8, 8, 11);
    let out = greedy_decode(&f.model(), &f.params, &f.lex, &[&[4, 5], &[6]], 0).unwrap();
    assert_eq!(out, vec![Vec::<usize>::new(), Vec::new()]);
    assert!(greedy_decode(&f.model(), &f.params, &f.lex, &[&[4]], 11).is_err());
}

#[test]
fn decode_ties_pick_lowest_id() {
    let mut f = fixture(small(), 8, 8, 12);
    *f.params.get_mut("dec.out.w").unwrap() = Tensor::zeros(&[8, 8]);
    let mut b = Tensor::zeros(&[1, 8]);
    b.data_mut()[5] = 1.0;
    b.data_mut()[6] = 1.0;
    *f.params.get_mut("dec.out.b").unwrap() = b;
    let out = greedy_decode(&f.model(), &f.params, &f.lex, &[&[4]], 3).unwrap();
    assert_eq!(out, vec![vec![5, 5, 5]]);
    assert_eq!(decode::argmax(&[0.0, 0.0]), 0);
}

#[test]
fn decode_is_batch_independent() {
    let f = fixture(small(), 12, 12, 13);
    let model = f.model();
    let a = greedy_decode(&model, &f.params, &f.lex, &[&[4, 5, 6]], 6).unwrap();
    let both = greedy_decode(&model, &f.params, &f.lex, &[&[4, 5, 6], &[7, 8, 9, 10, 11]], 6).unwrap();
    assert_eq!(a[0], both[0]);
}

#[test]
fn strategies_nest_strictly() {
    let f = fixture(small(), 8, 8, 14);
    let all = partition_mask(&f.params, FineTuneStrategy::All);
    let emb_enc = partition_mask(&f.params, FineTuneStrategy::EmbEnc);
    let emb = partition_mask(&f.params, FineTuneStrategy::Emb);
    assert_eq!(all, f.params.all_names());
    assert!(emb.is_subset(&emb_enc) && emb.len() < emb_enc.len());
    assert!(emb_enc.is_subset(&all) && emb_enc.len() < all.len());
    for n in &emb {
        assert_eq!(f.params.partition(n), Some(Partition::Embedding));
    }
    let n_emb = f
        .params
        .iter()
        .filter(|(_, e)| e.partition == Partition::Embedding)
        .count();
    assert_eq!(emb.len(), n_emb);
}

#[test]
fn strategy_names_parse() {
    for s in FineTuneStrategy::ALL {
        assert_eq!(s.as_str().parse::<FineTuneStrategy>().unwrap(), s);
    }
    assert!(matches!(
        "decoder".parse::<FineTuneStrategy>(),
        Err(Error::UnknownName { .. })
    ));
}

#[test]
fn config_validation() {
    let mut c = small();
    c.n_head = 3;
    assert!(c.validate().is_err());
    let mut c = small();
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut cfg = small();
    cfg.d_model = 4;
    cfg.d_ff = 6;
    let f = fixture(cfg, 7, 7, 15);
    let model = f.model();
    let pairs = vec![pair(&[4, 5, 6], &[5, 6]), pair(&[6], &[4, 4, 5])];
    let loss = |g: &mut Graph, vars: &crate::params::ParamVars| {
        model.loss(g, vars, &f.lex, &pairs, None)
    };
    let report =
        crate::autodiff::grad_check(loss, &f.params, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{:?}", report.failing());
}
