//! Universal lexical representation.
//!
//! Each token of language `k` is embedded as a softmax-weighted mixture of `M`
//! universal slots plus a per-language correction:
//!
//! ```text
//! score_i(x) = ± key[i]ᵀ · A · query_k[x] / τ
//! α(x)       = softmax(score(x))
//! e_k[x]     = Σ_i α_i(x) · universal[i] + delta_k[x]
//! ```
//!
//! `key` and every `query_k` are frozen. `universal` and `A` live in the
//! model's [`ParamSet`] under [`ULR_UNIVERSAL`] / [`ULR_TRANSFORM`] and are
//! trained only in the meta stage; `delta_k` lives under
//! [`delta_name`]`(k)` and is trained only while adapting to language `k`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamVars, Partition, TrainableSet};

pub const ULR_UNIVERSAL: &str = "ulr.universal";
pub const ULR_TRANSFORM: &str = "ulr.transform";
const DELTA_PREFIX: &str = "delta.";

/// Default temperature of the mixture softmax.
pub const DEFAULT_TAU: f64 = 0.05;

pub fn delta_name(language: &str) -> String {
    format!("{DELTA_PREFIX}{language}")
}

pub fn is_delta(name: &str) -> bool {
    name.starts_with(DELTA_PREFIX)
}

pub fn is_ulr_shared(name: &str) -> bool {
    name == ULR_UNIVERSAL || name == ULR_TRANSFORM
}

/// Sign convention of the key–query score.
///
/// `Affinity` (default) gives similar key/query pairs high weight. `Literal`
/// keeps the minus sign of `exp{-(1/τ) keyᵀ A query}` as written, so similar
/// pairs receive low weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySign {
    #[default]
    Affinity,
    Literal,
}

impl SimilaritySign {
    fn factor(self) -> f64 {
        match self {
            SimilaritySign::Affinity => 1.0,
            SimilaritySign::Literal => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UlrState {
    /// `M × d_model`
    pub universal: Tensor,
    /// `M × d_query`, frozen
    pub key: Tensor,
    /// `d_query × d_query`
    pub transform: Tensor,
    pub tau: f64,
    pub sign: SimilaritySign,
}

/// Pretrained, frozen query vectors of one language (`|V_k| × d_query`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageLexicon {
    pub language: String,
    pub query: Tensor,
}

impl LanguageLexicon {
    pub fn new(language: impl Into<String>, query: Tensor) -> Result<Self> {
        if query.rank() != 2 || query.shape()[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "query matrix must be a non-empty matrix, got {:?}",
                query.shape()
            )));
        }
        Ok(LanguageLexicon {
            language: language.into(),
            query,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn query_dim(&self) -> usize {
        self.query.shape()[1]
    }

    /// A zero correction table of width `d_model` for this language.
    pub fn zero_delta(&self, d_model: usize) -> Tensor {
        Tensor::zeros(&[self.vocab_size(), d_model])
    }
}

impl UlrState {
    pub fn new(
        universal: Tensor,
        key: Tensor,
        transform: Tensor,
        tau: f64,
        sign: SimilaritySign,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if universal.rank() != 2 || key.rank() != 2 || transform.rank() != 2 {
            return bad("ULR tensors must be matrices".into());
        }
        let (m, d) = (universal.shape()[0], universal.shape()[1]);
        if m == 0 || d == 0 {
            return bad(format!("ULR needs M >= 1 and d >= 1, got {m}×{d}"));
        }
        if key.shape()[0] != m {
            return Err(Error::shape("ulr key", key.shape(), universal.shape()));
        }
        let dq = key.shape()[1];
        if transform.shape() != [dq, dq] {
            return Err(Error::shape("ulr transform", transform.shape(), key.shape()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return bad(format!("tau must be > 0, got {tau}"));
        }
        Ok(UlrState {
            universal,
            key,
            transform,
            tau,
            sign,
        })
    }

    /// Builds the representation from the first `slots` query vectors of a
    /// pivot language: keys are those vectors, `A` is the identity, and the
    /// universal embeddings start from the same vectors when their width
    /// equals `d_model` (random otherwise).
    pub fn from_pivot(
        pivot_query: &Tensor,
        slots: usize,
        d_model: usize,
        tau: f64,
        sign: SimilaritySign,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let rows = pivot_query.shape().first().copied().unwrap_or(0);
        if slots == 0 || slots > rows {
            return Err(Error::InvalidArgument(format!(
                "cannot take {slots} slots from a pivot vocabulary of {rows}"
            )));
        }
        let dq = pivot_query.shape()[1];
        let ids: Vec<usize> = (0..slots).collect();
        let key = kernels::gather_rows(pivot_query, &ids)?;
        let universal = if dq == d_model {
            key.clone()
        } else {
            let normal = rand_distr::Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).unwrap();
            let data = (0..slots * d_model).map(|_| rng.sample(normal)).collect();
            Tensor::new(vec![slots, d_model], data)?
        };
        Self::new(universal, key, Tensor::identity(dq), tau, sign)
    }

    pub fn slots(&self) -> usize {
        self.universal.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.universal.shape()[1]
    }

    pub fn query_dim(&self) -> usize {
        self.key.shape()[1]
    }

    /// Writes the trainable tensors into `params`.
    pub fn install(&self, params: &mut ParamSet) {
        params.insert(ULR_UNIVERSAL, Partition::Embedding, self.universal.clone());
        params.insert(ULR_TRANSFORM, Partition::Embedding, self.transform.clone());
    }

    /// A copy whose trainable tensors are taken from `params`.
    pub fn synced(&self, params: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        out.universal = params.get(ULR_UNIVERSAL)?.clone();
        out.transform = params.get(ULR_TRANSFORM)?.clone();
        Ok(out)
    }

    fn check_lexicon(&self, lexicon: &LanguageLexicon, token: usize) -> Result<()> {
        if lexicon.query_dim() != self.query_dim() {
            return Err(Error::shape("ulr query", lexicon.query.shape(), self.key.shape()));
        }
        if token >= lexicon.vocab_size() {
            return Err(Error::TokenOutOfRange {
                id: token,
                size: lexicon.vocab_size(),
            });
        }
        Ok(())
    }

    /// Mixture scores `± key[i]ᵀ A query[x] / τ` for one token.
    pub fn scores(&self, lexicon: &LanguageLexicon, token: usize) -> Result<Vec<f64>> {
        self.check_lexicon(lexicon, token)?;
        let dq = self.query_dim();
        let q = lexicon.query.row(token);
        let aq: Vec<f64> = (0..dq)
            .map(|j| (0..dq).map(|k| self.transform.data()[j * dq + k] * q[k]).sum())
            .collect();
        let c = self.sign.factor() / self.tau;
        Ok((0..self.slots())
            .map(|i| c * self.key.row(i).iter().zip(&aq).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// The weights `α` over universal slots for one token.
    pub fn mixture_weights(&self, lexicon: &LanguageLexicon, token: usize) -> Result<Vec<f64>> {
        let s = Tensor::vector(self.scores(lexicon, token)?);
        Ok(kernels::softmax_last(&s).into_data())
    }

    /// Embedding of one token: the slot mixture plus `delta[token]` if given.
    pub fn embed(
        &self,
        lexicon: &LanguageLexicon,
        delta: Option<&Tensor>,
        token: usize,
    ) -> Result<Vec<f64>> {
        let alpha = self.mixture_weights(lexicon, token)?;
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (i, a) in alpha.iter().enumerate() {
            for (o, u) in out.iter_mut().zip(self.universal.row(i)) {
                *o += a * u;
            }
        }
        if let Some(delta) = delta {
            if delta.shape() != [lexicon.vocab_size(), d] {
                return Err(Error::shape("ulr delta", delta.shape(), &[lexicon.vocab_size(), d]));
            }
            for (o, v) in out.iter_mut().zip(delta.row(token)) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Graph version of [`embed`](Self::embed) for a set of distinct token
    /// ids, giving a `[ids.len(), d_model]` table. The universal matrix and
    /// transform come from `vars`; the language's delta is added when
    /// `vars` has one.
    pub fn embedding_table(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        lexicon: &LanguageLexicon,
        ids: &[usize],
    ) -> Result<Var> {
        let get = |name: &str| vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.into()));
        let universal = get(ULR_UNIVERSAL)?;
        let transform = get(ULR_TRANSFORM)?;
        if lexicon.query_dim() != self.query_dim() {
            return Err(Error::shape("ulr query", lexicon.query.shape(), self.key.shape()));
        }
        let q = g.constant(kernels::gather_rows(&lexicon.query, ids)?);
        let key = g.constant(self.key.clone());
        let ka = g.matmul(key, transform)?;
        let kat = g.transpose(ka)?;
        let s = g.matmul(q, kat)?;
        let s = g.scale(s, self.sign.factor() / self.tau)?;
        let alpha = g.softmax(s)?;
        let e = g.matmul(alpha, universal)?;
        match vars.get(&delta_name(&lexicon.language)) {
            Some(&delta) => {
                let d = g.embedding_lookup(delta, ids)?;
                g.add(e, d)
            }
            None => Ok(e),
        }
    }
}

/// Training stage, which decides who may be updated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Network weights plus the universal matrix and transform; every delta frozen.
    Meta,
    /// Network weights plus the delta of this language; universal matrix and transform frozen.
    LanguageSpecific(String),
}

/// Names of `params` trainable in `stage`. Keys and queries are never in a
/// parameter set, so they are frozen in every stage.
pub fn set_stage(params: &ParamSet, stage: &Stage) -> TrainableSet {
    params
        .names()
        .filter(|n| match stage {
            Stage::Meta => !is_delta(n),
            Stage::LanguageSpecific(lang) => {
                if is_delta(n) {
                    **n == delta_name(lang)
                } else {
                    !is_ulr_shared(n)
                }
            }
        })
        .cloned()
        .collect()
}
