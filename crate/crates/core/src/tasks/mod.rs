//! Parallel corpora, token-budget subsampling, synthetic families and the
//! tokenized tasks the learners consume.

mod corpus;
mod embeddings;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::model::vocab::NUM_RESERVED;
use crate::model::{SentencePair, Vocabulary};
use crate::ulr::{LanguageLexicon, SimilaritySign, UlrState};

pub use corpus::{budget_prefix, companion, load_corpus, write_pairs, Corpus, Sentence, Tokenizer};
pub use embeddings::{read_embeddings, write_embeddings, WordVectors};
pub use synth::{
    generate_family, latent_word, Category, GeneratedFamily, GeneratedLanguage, GroundTruth,
    LanguageTruth, OrderRules, SyntheticFamilySpec,
};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Name of the shared target language, whose vectors seed the ULR keys.
pub const PIVOT_LANGUAGE: &str = "en";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEntry {
    pub name: String,
    /// Train corpus, relative to the manifest directory.
    pub corpus: String,
    pub embeddings: String,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyManifest {
    pub target_language: String,
    pub pivot_embeddings: String,
    pub sources: Vec<LanguageEntry>,
    pub targets: Vec<LanguageEntry>,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    pub ground_truth: Option<String>,
    pub seed: Option<u64>,
    pub synthetic: Option<SyntheticFamilySpec>,
}

impl FamilyManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One language pair ready for training: token ids, frozen query vectors and
/// the three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub vocab: Vocabulary,
    pub lexicon: LanguageLexicon,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

impl Task {
    /// Tokenized task from a corpus. Source ids follow the order of
    /// `vectors`; corpus words without a vector get a zero query. Pairs with
    /// a side longer than `max_len - 1` tokens are dropped and counted.
    pub fn build(
        name: &str,
        corpus: &Corpus,
        vectors: &WordVectors,
        target_vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Task> {
        let mut vocab = Vocabulary::from_tokens(vectors.words.iter().map(String::as_str));
        for &i in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
            for w in &corpus.pairs[i].0 {
                vocab.add(w);
            }
        }
        let d = vectors.dim();
        let mut query = Tensor::zeros(&[vocab.len(), d]);
        for (row, w) in vectors.words.iter().enumerate() {
            let id = vocab.id(w).unwrap();
            query.row_mut(id).copy_from_slice(vectors.vectors.row(row));
        }
        let lexicon = LanguageLexicon::new(name, query)?;
        let mut dropped = 0usize;
        let mut encode = |idx: &[usize]| -> Vec<SentencePair> {
            idx.iter()
                .filter_map(|&i| {
                    let (s, t) = &corpus.pairs[i];
                    if s.len() + 1 > max_len || t.len() + 1 > max_len {
                        dropped += 1;
                        return None;
                    }
                    Some(SentencePair::new(vocab.encode(s), target_vocab.encode(t)))
                })
                .collect()
        };
        let (train, dev, test) = (encode(&corpus.train), encode(&corpus.dev), encode(&corpus.test));
        if dropped > 0 {
            log::info!("{name}: dropped {dropped} pairs longer than max_len {max_len}");
        }
        if train.is_empty() {
            return Err(Error::InvalidArgument(format!("task {name} has no usable train pairs")));
        }
        Ok(Task {
            name: name.to_string(),
            vocab,
            lexicon,
            train,
            dev,
            test,
        })
    }

    pub fn train_tokens(&self) -> usize {
        self.train.iter().map(|p| p.target.len()).sum()
    }

    /// The task with its train split cut to `budget` target tokens.
    pub fn subsample(&self, budget: usize, seed: u64) -> Result<Task> {
        let lens: Vec<usize> = self.train.iter().map(|p| p.target.len()).collect();
        let idx = budget_prefix(&lens, budget, seed)?;
        Ok(Task {
            train: idx.into_iter().map(|i| self.train[i].clone()).collect(),
            ..self.clone()
        })
    }
}

/// Source and target tasks sharing one target vocabulary.
#[derive(Clone, Debug)]
pub struct Family {
    pub target_vocab: Vocabulary,
    /// Pivot vectors over the target vocabulary.
    pub pivot: LanguageLexicon,
    pub sources: Vec<Task>,
    pub targets: Vec<Task>,
    pub dir: Option<PathBuf>,
}

impl Family {
    pub fn load(manifest_path: &Path, max_len: usize) -> Result<Family> {
        let manifest = FamilyManifest::read(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let pivot = read_embeddings(&dir.join(&manifest.pivot_embeddings))?;
        let load = |e: &LanguageEntry| -> Result<(String, Corpus, WordVectors)> {
            let corpus = load_corpus(&dir.join(&e.corpus), manifest.tokenizer)?;
            let vectors = read_embeddings(&dir.join(&e.embeddings))?;
            Ok((e.name.clone(), corpus, vectors))
        };
        let sources = manifest.sources.iter().map(load).collect::<Result<Vec<_>>>()?;
        let targets = manifest.targets.iter().map(load).collect::<Result<Vec<_>>>()?;
        let mut fam = Self::assemble(&pivot, &sources, &targets, max_len)?;
        fam.dir = Some(dir.to_path_buf());
        Ok(fam)
    }

    /// Builds a family from in-memory corpora, as [`load`](Self::load) does
    /// from files.
    pub fn assemble(
        pivot: &WordVectors,
        sources: &[(String, Corpus, WordVectors)],
        targets: &[(String, Corpus, WordVectors)],
        max_len: usize,
    ) -> Result<Family> {
        let mut target_vocab = Vocabulary::from_tokens(pivot.words.iter().map(String::as_str));
        for (_, c, _) in sources.iter().chain(targets) {
            for (_, t) in &c.pairs {
                for w in t {
                    target_vocab.add(w);
                }
            }
        }
        let mut q = Tensor::zeros(&[target_vocab.len(), pivot.dim()]);
        for (row, w) in pivot.words.iter().enumerate() {
            q.row_mut(target_vocab.id(w).unwrap())
                .copy_from_slice(pivot.vectors.row(row));
        }
        let pivot_lex = LanguageLexicon::new(PIVOT_LANGUAGE, q)?;
        let build = |(n, c, v): &(String, Corpus, WordVectors)| {
            if v.dim() != pivot.dim() {
                return Err(Error::InvalidArgument(format!(
                    "{n}: vectors have dim {} but the pivot has {}",
                    v.dim(),
                    pivot.dim()
                )));
            }
            Task::build(n, c, v, &target_vocab, max_len)
        };
        Ok(Family {
            sources: sources.iter().map(build).collect::<Result<_>>()?,
            targets: targets.iter().map(build).collect::<Result<_>>()?,
            pivot: pivot_lex,
            target_vocab,
            dir: None,
        })
    }

    pub fn from_generated(g: &GeneratedFamily, max_len: usize) -> Result<Family> {
        let conv = |l: &GeneratedLanguage| (l.name.clone(), l.corpus.clone(), l.vectors.clone());
        let sources: Vec<_> = g.sources.iter().map(conv).collect();
        let targets: Vec<_> = g.targets.iter().map(conv).collect();
        Self::assemble(&g.pivot, &sources, &targets, max_len)
    }

    pub fn task(&self, name: &str) -> Result<&Task> {
        self.sources
            .iter()
            .chain(&self.targets)
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownName {
                kind: "task",
                name: name.to_string(),
                known: self
                    .sources
                    .iter()
                    .chain(&self.targets)
                    .map(|t| t.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    /// Initial ULR: keys are the pivot vectors of the `slots` most frequent
    /// target-side words of the family (reserved tokens skipped).
    pub fn ulr_init(
        &self,
        slots: usize,
        d_model: usize,
        tau: f64,
        sign: SimilaritySign,
        rng: &mut impl rand::Rng,
    ) -> Result<UlrState> {
        let mut counts = vec![0usize; self.pivot.vocab_size()];
        for t in self.sources.iter().chain(&self.targets) {
            for p in &t.train {
                for &w in &p.target {
                    if w < counts.len() {
                        counts[w] += 1;
                    }
                }
            }
        }
        let mut ids: Vec<usize> = (NUM_RESERVED..self.pivot.vocab_size()).collect();
        ids.sort_by(|a, b| counts[*b].cmp(&counts[*a]).then(a.cmp(b)));
        ids.truncate(slots);
        let rows = kernels::gather_rows(&self.pivot.query, &ids)?;
        UlrState::from_pivot(&rows, ids.len(), d_model, tau, sign, rng)
    }

    pub fn lexicons(&self) -> Vec<&LanguageLexicon> {
        self.sources
            .iter()
            .chain(&self.targets)
            .map(|t| &t.lexicon)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticFamilySpec {
        SyntheticFamilySpec {
            n_sources: 2,
            n_targets: 1,
            latent_vocab: 24,
            vocab_size: 28,
            source_sentences: 60,
            target_sentences: 80,
            dev_sentences: 6,
            test_sentences: 7,
            embedding_dim: 8,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn written_family_loads_like_in_memory_one() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_family(&spec()).unwrap();
        let manifest = g.write(dir.path()).unwrap();
        assert_eq!(manifest.sources.len(), 2);
        let loaded = Family::load(&dir.path().join(MANIFEST_FILE), 16).unwrap();
        let direct = Family::from_generated(&g, 16).unwrap();
        assert_eq!(loaded.target_vocab, direct.target_vocab);
        assert_eq!(loaded.sources, direct.sources);
        assert_eq!(loaded.targets, direct.targets);
        let t = loaded.task("tgt0").unwrap();
        assert_eq!((t.train.len(), t.dev.len(), t.test.len()), (80, 6, 7));
        assert!(loaded.task("nope").is_err());
    }

    #[test]
    fn token_ids_round_trip_through_vocab_serialization() {
        let fam = Family::from_generated(&generate_family(&spec()).unwrap(), 16).unwrap();
        for task in fam.sources.iter().chain(&fam.targets) {
            let json = serde_json::to_string(&task.vocab).unwrap();
            let back: Vocabulary = serde_json::from_str(&json).unwrap();
            for p in &task.train {
                let words = task.vocab.decode(&p.source).unwrap();
                assert_eq!(back.encode(&words), p.source);
                assert!(p.source.iter().all(|&i| i >= NUM_RESERVED));
            }
        }
    }

    #[test]
    fn long_pairs_filtered() {
        let fam = Family::from_generated(&generate_family(&spec()).unwrap(), 8).unwrap();
        for p in &fam.sources[0].train {
            assert!(p.source.len() < 8 && p.target.len() < 8);
        }
    }

    #[test]
    fn subsample_respects_budget() {
        let fam = Family::from_generated(&generate_family(&spec()).unwrap(), 16).unwrap();
        let t = fam.targets[0].subsample(100, 4).unwrap();
        assert!(t.train_tokens() >= 100 && t.train_tokens() < 100 + 16);
        assert_eq!(t.test, fam.targets[0].test);
    }

    #[test]
    fn ulr_keys_skip_reserved_rows() {
        let fam = Family::from_generated(&generate_family(&spec()).unwrap(), 16).unwrap();
        let mut rng = rand::rng();
        let ulr = fam.ulr_init(64, 8, 0.05, SimilaritySign::Affinity, &mut rng).unwrap();
        assert_eq!(ulr.slots(), 24);
        for i in 0..ulr.slots() {
            let row = ulr.key.row(i);
            let id = (0..fam.pivot.vocab_size())
                .find(|&w| fam.pivot.query.row(w) == row)
                .unwrap();
            assert!(id >= NUM_RESERVED);
        }
    }

    #[test]
    fn ulr_keys_are_most_frequent_english_words() {
        let fam = Family::from_generated(&generate_family(&spec()).unwrap(), 16).unwrap();
        let mut counts = std::collections::HashMap::new();
        for t in fam.sources.iter().chain(&fam.targets) {
            for p in &t.train {
                for &w in &p.target {
                    *counts.entry(w).or_insert(0usize) += 1;
                }
            }
        }
        let mut rng = rand::rng();
        let ulr = fam.ulr_init(5, 8, 0.05, SimilaritySign::Affinity, &mut rng).unwrap();
        let picked: Vec<usize> = (0..5)
            .map(|i| {
                (NUM_RESERVED..fam.pivot.vocab_size())
                    .find(|&w| fam.pivot.query.row(w) == ulr.key.row(i))
                    .unwrap()
            })
            .collect();
        let freq: Vec<usize> = picked.iter().map(|w| counts.get(w).copied().unwrap_or(0)).collect();
        assert!(freq.windows(2).all(|w| w[0] >= w[1]), "{freq:?}");
        let min_picked = *freq.last().unwrap();
        let unpicked_max = (NUM_RESERVED..fam.pivot.vocab_size())
            .filter(|w| !picked.contains(w))
            .map(|w| counts.get(&w).copied().unwrap_or(0))
            .max()
            .unwrap();
        assert!(min_picked >= unpicked_max);
    }
}
