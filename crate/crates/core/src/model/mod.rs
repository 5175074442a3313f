//! Encoder-decoder Transformer over a universal source-side lexicon.

mod decode;
mod transformer;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSet, Partition, TrainableSet};

pub use decode::greedy_decode;
pub use transformer::{init_params, Encoded, Translator};
pub use vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_ff: usize,
    /// Longest sentence, counting the appended `<eos>` / prepended `<bos>`.
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layer: 2,
            n_head: 2,
            d_ff: 128,
            max_len: 32,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.n_head == 0 || self.n_layer == 0 || self.d_ff == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.d_model % self.n_head != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            ));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// One source/target pair of token-id sentences, without special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl SentencePair {
    pub fn new(source: Vec<usize>, target: Vec<usize>) -> Self {
        SentencePair { source, target }
    }
}

/// Which partitions are fine-tuned on the target task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FineTuneStrategy {
    #[default]
    #[serde(rename = "all")]
    All,
    #[serde(rename = "emb+enc")]
    EmbEnc,
    #[serde(rename = "emb")]
    Emb,
}

impl FineTuneStrategy {
    pub const ALL: [FineTuneStrategy; 3] = [Self::All, Self::EmbEnc, Self::Emb];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::EmbEnc => "emb+enc",
            Self::Emb => "emb",
        }
    }

    fn admits(self, p: Partition) -> bool {
        match self {
            Self::All => true,
            Self::EmbEnc => p != Partition::Decoder,
            Self::Emb => p == Partition::Embedding,
        }
    }
}

impl fmt::Display for FineTuneStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FineTuneStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "fine-tuning strategy",
                name: s.to_string(),
                known: "all, emb+enc, emb".into(),
            })
    }
}

/// Parameter names a strategy allows to change.
pub fn partition_mask(params: &ParamSet, strategy: FineTuneStrategy) -> TrainableSet {
    params
        .iter()
        .filter(|(_, e)| strategy.admits(e.partition))
        .map(|(n, _)| n.clone())
        .collect()
}

#[cfg(test)]
mod tests;
