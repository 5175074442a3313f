use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::vocab::{BOS, EOS, PAD};
use super::{ModelConfig, SentencePair};
use crate::autodiff::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamVars, Partition};
use crate::ulr::{delta_name, LanguageLexicon, UlrState};

pub const TARGET_EMBEDDING: &str = "emb.target";
const MASKED: f64 = -1e9;

/// Fresh parameters: network weights, the ULR trainables taken from `ulr`,
/// and a zero delta table for every lexicon.
pub fn init_params(
    cfg: &ModelConfig,
    ulr: &UlrState,
    target_vocab: usize,
    lexicons: &[&LanguageLexicon],
    rng: &mut impl Rng,
) -> Result<ParamSet> {
    cfg.validate()?;
    if ulr.dim() != cfg.d_model {
        return Err(Error::InvalidArgument(format!(
            "ULR width {} differs from d_model {}",
            ulr.dim(),
            cfg.d_model
        )));
    }
    let d = cfg.d_model;
    let mut p = ParamSet::new();
    ulr.install(&mut p);
    for lex in lexicons {
        p.insert(delta_name(&lex.language), Partition::Embedding, lex.zero_delta(d));
    }
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    let emb = (0..target_vocab * d).map(|_| normal.sample(rng)).collect();
    p.insert(TARGET_EMBEDDING, Partition::Embedding, Tensor::new(vec![target_vocab, d], emb)?);

    let mut linear = |p: &mut ParamSet, part: Partition, name: &str, i: usize, o: usize| {
        let limit = (6.0 / (i + o) as f64).sqrt();
        let u = Uniform::new_inclusive(-limit, limit).unwrap();
        let w = (0..i * o).map(|_| u.sample(rng)).collect();
        p.insert(format!("{name}.w"), part, Tensor::from_parts(vec![i, o], w));
        p.insert(format!("{name}.b"), part, Tensor::zeros(&[1, o]));
    };
    let norm = |p: &mut ParamSet, part: Partition, name: &str| {
        p.insert(format!("{name}.g"), part, Tensor::ones(&[1, d]));
        p.insert(format!("{name}.b"), part, Tensor::zeros(&[1, d]));
    };
    for l in 0..cfg.n_layer {
        let e = Partition::Encoder;
        linear(&mut p, e, &format!("enc.{l}.self.qkv"), d, 3 * d);
        linear(&mut p, e, &format!("enc.{l}.self.out"), d, d);
        norm(&mut p, e, &format!("enc.{l}.ln1"));
        linear(&mut p, e, &format!("enc.{l}.ff1"), d, cfg.d_ff);
        linear(&mut p, e, &format!("enc.{l}.ff2"), cfg.d_ff, d);
        norm(&mut p, e, &format!("enc.{l}.ln2"));
    }
    for l in 0..cfg.n_layer {
        let dp = Partition::Decoder;
        linear(&mut p, dp, &format!("dec.{l}.self.qkv"), d, 3 * d);
        linear(&mut p, dp, &format!("dec.{l}.self.out"), d, d);
        norm(&mut p, dp, &format!("dec.{l}.ln1"));
        linear(&mut p, dp, &format!("dec.{l}.cross.q"), d, d);
        linear(&mut p, dp, &format!("dec.{l}.cross.kv"), d, 2 * d);
        linear(&mut p, dp, &format!("dec.{l}.cross.out"), d, d);
        norm(&mut p, dp, &format!("dec.{l}.ln2"));
        linear(&mut p, dp, &format!("dec.{l}.ff1"), d, cfg.d_ff);
        linear(&mut p, dp, &format!("dec.{l}.ff2"), cfg.d_ff, d);
        norm(&mut p, dp, &format!("dec.{l}.ln3"));
    }
    linear(&mut p, Partition::Decoder, "dec.out", d, target_vocab);
    Ok(p)
}

/// Sinusoidal position table, `[len, d]`.
fn positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

/// Encoder output for a padded batch.
pub struct Encoded {
    /// `[batch * len, d_model]`
    pub memory: Var,
    /// Source lengths including `<eos>`.
    pub lens: Vec<usize>,
    pub len: usize,
}

/// Forward computations of the translator, parameterized by the frozen
/// parts of the lexical representation.
#[derive(Clone, Copy)]
pub struct Translator<'a> {
    pub config: &'a ModelConfig,
    pub ulr: &'a UlrState,
}

struct Ctx<'v> {
    vars: &'v ParamVars,
    dropout: Option<ChaCha8Rng>,
    p: f64,
}

impl Ctx<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gain = self.get(&format!("{name}.g"))?;
        let bias = self.get(&format!("{name}.b"))?;
        g.layer_norm_affine(x, gain, bias, LAYER_NORM_EPS)
    }

    fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::from_parts(shape, mask));
        g.mul(x, m)
    }
}

impl<'a> Translator<'a> {
    pub fn new(config: &'a ModelConfig, ulr: &'a UlrState) -> Self {
        Translator { config, ulr }
    }

    fn ctx<'v>(&self, vars: &'v ParamVars, dropout_seed: Option<u64>) -> Ctx<'v> {
        Ctx {
            vars,
            dropout: dropout_seed.map(ChaCha8Rng::seed_from_u64),
            p: self.config.dropout,
        }
    }

    fn check_sentence(&self, s: &[usize], extra: usize) -> Result<()> {
        if s.is_empty() {
            return Err(Error::EmptySentence);
        }
        if s.len() + extra > self.config.max_len {
            return Err(Error::SentenceTooLong {
                len: s.len() + extra,
                max_len: self.config.max_len,
            });
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        mask: Var,
        batch: usize,
        tq: usize,
        tk: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let h = self.config.n_head;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let (qi, ki, vi) = if h == 1 {
                (q, k, v)
            } else {
                (g.slice(q, i * dh, dh)?, g.slice(k, i * dh, dh)?, g.slice(v, i * dh, dh)?)
            };
            let qi = g.reshape(qi, &[batch, tq, dh])?;
            let ki = g.reshape(ki, &[batch, tk, dh])?;
            let vi = g.reshape(vi, &[batch, tk, dh])?;
            let kt = g.transpose(ki)?;
            let s = g.matmul(qi, kt)?;
            let s = g.scale(s, scale)?;
            let s = g.add(s, mask)?;
            let a = g.softmax(s)?;
            let c = g.matmul(a, vi)?;
            heads.push(g.reshape(c, &[batch * tq, dh])?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            g.concat(&heads)
        }
    }

    fn embed_positions(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Result<Var> {
        let d = self.config.d_model;
        let pe = positions(len, d);
        let mut tiled = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.constant(Tensor::from_parts(vec![batch * len, d], tiled));
        let x = g.scale(x, (d as f64).sqrt())?;
        g.add(x, pe)
    }

    /// Runs the encoder over `sources` (token ids, `<eos>` appended here).
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        lexicon: &LanguageLexicon,
        sources: &[&[usize]],
        dropout_seed: Option<u64>,
    ) -> Result<Encoded> {
        let mut ctx = self.ctx(vars, dropout_seed);
        self.encode_with(g, &mut ctx, lexicon, sources)
    }

    fn encode_with(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx<'_>,
        lexicon: &LanguageLexicon,
        sources: &[&[usize]],
    ) -> Result<Encoded> {
        if sources.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for s in sources {
            self.check_sentence(s, 1)?;
            if let Some(&bad) = s.iter().find(|&&t| t >= lexicon.vocab_size()) {
                return Err(Error::TokenOutOfRange {
                    id: bad,
                    size: lexicon.vocab_size(),
                });
            }
        }
        let batch = sources.len();
        let lens: Vec<usize> = sources.iter().map(|s| s.len() + 1).collect();
        let len = *lens.iter().max().unwrap();
        let mut ids = Vec::with_capacity(batch * len);
        for s in sources {
            ids.extend_from_slice(s);
            ids.push(EOS);
            ids.extend(std::iter::repeat_n(PAD, len - s.len() - 1));
        }
        let mut unique = ids.clone();
        unique.sort_unstable();
        unique.dedup();
        let positions_in_unique: Vec<usize> = ids
            .iter()
            .map(|t| unique.binary_search(t).unwrap())
            .collect();
        let table = self.ulr.embedding_table(g, ctx.vars, lexicon, &unique)?;
        let x = g.embedding_lookup(table, &positions_in_unique)?;
        let x = self.embed_positions(g, x, batch, len)?;
        let mut x = ctx.dropout(g, x)?;

        let mut mask = Tensor::zeros(&[batch, len, len]);
        for (b, &l) in lens.iter().enumerate() {
            for i in 0..len {
                let row = &mut mask.data_mut()[(b * len + i) * len..(b * len + i + 1) * len];
                row[l..].iter_mut().for_each(|v| *v = MASKED);
            }
        }
        let mask = g.constant(mask);
        let d = self.config.d_model;
        for l in 0..self.config.n_layer {
            let qkv = ctx.linear(g, x, &format!("enc.{l}.self.qkv"))?;
            let q = g.slice(qkv, 0, d)?;
            let k = g.slice(qkv, d, d)?;
            let v = g.slice(qkv, 2 * d, d)?;
            let a = self.attention(g, q, k, v, mask, batch, len, len)?;
            let a = ctx.linear(g, a, &format!("enc.{l}.self.out"))?;
            let a = ctx.dropout(g, a)?;
            let r = g.add(x, a)?;
            x = ctx.norm(g, r, &format!("enc.{l}.ln1"))?;
            let f = ctx.linear(g, x, &format!("enc.{l}.ff1"))?;
            let f = g.relu(f)?;
            let f = ctx.linear(g, f, &format!("enc.{l}.ff2"))?;
            let f = ctx.dropout(g, f)?;
            let r = g.add(x, f)?;
            x = ctx.norm(g, r, &format!("enc.{l}.ln2"))?;
        }
        Ok(Encoded {
            memory: x,
            lens,
            len,
        })
    }

    /// Output logits `[batch * len, V]` for decoder inputs `tgt_in`, which
    /// must all have the same length and already start with `<bos>`.
    pub fn decoder_logits(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        enc: &Encoded,
        tgt_in: &[Vec<usize>],
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let mut ctx = self.ctx(vars, dropout_seed);
        self.decode_with(g, &mut ctx, enc, tgt_in)
    }

    fn decode_with(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx<'_>,
        enc: &Encoded,
        tgt_in: &[Vec<usize>],
    ) -> Result<Var> {
        let batch = tgt_in.len();
        if batch != enc.lens.len() {
            return Err(Error::InvalidArgument(format!(
                "{batch} decoder rows for {} encoded sentences",
                enc.lens.len()
            )));
        }
        let len = tgt_in[0].len();
        if tgt_in.iter().any(|t| t.len() != len) || len == 0 {
            return Err(Error::InvalidArgument("decoder inputs must be padded to one length".into()));
        }
        if len > self.config.max_len {
            return Err(Error::SentenceTooLong {
                len,
                max_len: self.config.max_len,
            });
        }
        let ids: Vec<usize> = tgt_in.iter().flatten().copied().collect();
        let table = ctx.get(TARGET_EMBEDDING)?;
        let x = g.embedding_lookup(table, &ids)?;
        let x = self.embed_positions(g, x, batch, len)?;
        let mut x = ctx.dropout(g, x)?;

        let mut self_mask = Tensor::zeros(&[batch, len, len]);
        for b in 0..batch {
            for i in 0..len {
                let row = &mut self_mask.data_mut()[(b * len + i) * len..(b * len + i + 1) * len];
                row[i + 1..].iter_mut().for_each(|v| *v = MASKED);
            }
        }
        let self_mask = g.constant(self_mask);
        let sl = enc.len;
        let mut cross_mask = Tensor::zeros(&[batch, len, sl]);
        for (b, &l) in enc.lens.iter().enumerate() {
            for i in 0..len {
                let row = &mut cross_mask.data_mut()[(b * len + i) * sl..(b * len + i + 1) * sl];
                row[l..].iter_mut().for_each(|v| *v = MASKED);
            }
        }
        let cross_mask = g.constant(cross_mask);

        let d = self.config.d_model;
        for l in 0..self.config.n_layer {
            let qkv = ctx.linear(g, x, &format!("dec.{l}.self.qkv"))?;
            let q = g.slice(qkv, 0, d)?;
            let k = g.slice(qkv, d, d)?;
            let v = g.slice(qkv, 2 * d, d)?;
            let a = self.attention(g, q, k, v, self_mask, batch, len, len)?;
            let a = ctx.linear(g, a, &format!("dec.{l}.self.out"))?;
            let a = ctx.dropout(g, a)?;
            let r = g.add(x, a)?;
            x = ctx.norm(g, r, &format!("dec.{l}.ln1"))?;

            let q = ctx.linear(g, x, &format!("dec.{l}.cross.q"))?;
            let kv = ctx.linear(g, enc.memory, &format!("dec.{l}.cross.kv"))?;
            let k = g.slice(kv, 0, d)?;
            let v = g.slice(kv, d, d)?;
            let a = self.attention(g, q, k, v, cross_mask, batch, len, sl)?;
            let a = ctx.linear(g, a, &format!("dec.{l}.cross.out"))?;
            let a = ctx.dropout(g, a)?;
            let r = g.add(x, a)?;
            x = ctx.norm(g, r, &format!("dec.{l}.ln2"))?;

            let f = ctx.linear(g, x, &format!("dec.{l}.ff1"))?;
            let f = g.relu(f)?;
            let f = ctx.linear(g, f, &format!("dec.{l}.ff2"))?;
            let f = ctx.dropout(g, f)?;
            let r = g.add(x, f)?;
            x = ctx.norm(g, r, &format!("dec.{l}.ln3"))?;
        }
        ctx.linear(g, x, "dec.out")
    }

    /// Mean negative log-likelihood per target token (targets get `<eos>`
    /// appended; decoder inputs get `<bos>` prepended).
    pub fn loss(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        lexicon: &LanguageLexicon,
        pairs: &[SentencePair],
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for p in pairs {
            self.check_sentence(&p.target, 1)?;
        }
        let mut ctx = self.ctx(vars, dropout_seed);
        let sources: Vec<&[usize]> = pairs.iter().map(|p| p.source.as_slice()).collect();
        let enc = self.encode_with(g, &mut ctx, lexicon, &sources)?;
        let len = pairs.iter().map(|p| p.target.len() + 1).max().unwrap();
        let tgt_in: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| {
                let mut t = Vec::with_capacity(len);
                t.push(BOS);
                t.extend_from_slice(&p.target);
                t.resize(len, PAD);
                t
            })
            .collect();
        let logits = self.decode_with(g, &mut ctx, &enc, &tgt_in)?;
        let vocab = g.shape(logits)[1];
        let mut pick = Tensor::zeros(&[pairs.len() * len, vocab]);
        let mut count = 0usize;
        for (b, p) in pairs.iter().enumerate() {
            for (t, &y) in p.target.iter().chain(std::iter::once(&EOS)).enumerate() {
                if y >= vocab {
                    return Err(Error::TokenOutOfRange { id: y, size: vocab });
                }
                pick.row_mut(b * len + t)[y] = 1.0;
                count += 1;
            }
        }
        let logp = g.log_softmax(logits)?;
        let pick = g.constant(pick);
        let picked = g.mul(logp, pick)?;
        let total = g.sum(picked)?;
        g.scale(total, -1.0 / count as f64)
    }
}
