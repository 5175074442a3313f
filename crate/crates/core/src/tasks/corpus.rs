use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    Char,
}

impl Tokenizer {
    pub fn tokenize(self, text: &str) -> Sentence {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

impl FromStr for Tokenizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(Tokenizer::Whitespace),
            "char" => Ok(Tokenizer::Char),
            _ => Err(Error::UnknownName {
                kind: "tokenizer",
                name: s.to_string(),
                known: "whitespace, char".into(),
            }),
        }
    }
}

/// Tokenized sentence pairs plus train/dev/test index sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub pairs: Vec<(Sentence, Sentence)>,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Corpus {
    /// A corpus whose pairs are all in the train split.
    pub fn from_pairs(pairs: Vec<(Sentence, Sentence)>) -> Self {
        let train = (0..pairs.len()).collect();
        Corpus {
            pairs,
            train,
            dev: Vec::new(),
            test: Vec::new(),
        }
    }

    pub fn split(&self, idx: &[usize]) -> Vec<&(Sentence, Sentence)> {
        idx.iter().map(|&i| &self.pairs[i]).collect()
    }

    /// Target-side tokens of the train split.
    pub fn train_tokens(&self) -> usize {
        self.train.iter().map(|&i| self.pairs[i].1.len()).sum()
    }

    pub fn check_splits(&self) -> Result<()> {
        let mut seen = vec![false; self.pairs.len()];
        for &i in self.train.iter().chain(&self.dev).chain(&self.test) {
            match seen.get_mut(i) {
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "split index {i} out of range for {} pairs",
                        self.pairs.len()
                    )))
                }
                Some(true) => {
                    return Err(Error::InvalidArgument(format!("pair {i} is in two splits")))
                }
                Some(s) => *s = true,
            }
        }
        Ok(())
    }

    /// The train split cut down to a target-token budget; see
    /// [`budget_prefix`]. Dev and test are kept as they are.
    pub fn subsample_by_tokens(&self, budget: usize, seed: u64) -> Result<Corpus> {
        let lens: Vec<usize> = self.train.iter().map(|&i| self.pairs[i].1.len()).collect();
        let picked = budget_prefix(&lens, budget, seed)?;
        Ok(Corpus {
            pairs: self.pairs.clone(),
            train: picked.into_iter().map(|j| self.train[j]).collect(),
            dev: self.dev.clone(),
            test: self.test.clone(),
        })
    }
}

/// Shuffles `0..lens.len()` with `seed` and keeps the shortest prefix whose
/// summed lengths reach `budget`. The whole set is returned (with a warning)
/// when it holds fewer tokens than the budget. Prefixes for smaller budgets
/// are subsets of those for larger ones under the same seed.
pub fn budget_prefix(lens: &[usize], budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget == 0 {
        return Err(Error::InvalidArgument("token budget must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut total = 0;
    for (n, &i) in order.iter().enumerate() {
        if total >= budget {
            order.truncate(n);
            return Ok(order);
        }
        total += lens[i];
    }
    if total < budget {
        log::warn!("corpus holds {total} target tokens, below the budget of {budget}; using all of it");
    }
    Ok(order)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_pairs(path: &Path, text: &str, tok: Tokenizer) -> Result<Vec<(Sentence, Sentence)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let (src, tgt) = line.split_once('\t').ok_or_else(|| err("missing tab separator"))?;
        let (src, tgt) = (tok.tokenize(src), tok.tokenize(tgt));
        if src.is_empty() || tgt.is_empty() {
            return Err(err("empty sentence"));
        }
        pairs.push((src, tgt));
    }
    Ok(pairs)
}

fn parse_indices(text: &str) -> Option<Vec<usize>> {
    text.lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.parse().ok())
        .collect()
}

/// Companion file next to `path`: `dir/<stem>.<ext>`.
pub fn companion(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Reads a `source<TAB>target` corpus. Companion `<stem>.dev` and
/// `<stem>.test` files, when present, hold either line indices into the main
/// file or further pairs; everything not claimed by them is train.
pub fn load_corpus(path: &Path, tok: Tokenizer) -> Result<Corpus> {
    let text = read_text(path)?;
    let pairs = parse_pairs(path, &text, tok)?;
    if pairs.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "empty corpus".into(),
        });
    }
    let mut corpus = Corpus::from_pairs(pairs);
    let n_main = corpus.pairs.len();
    let mut claimed = vec![false; n_main];
    for ext in ["dev", "test"] {
        let side = companion(path, ext);
        if !side.exists() {
            continue;
        }
        let text = read_text(&side)?;
        let idx = match parse_indices(&text) {
            Some(idx) => {
                for &i in &idx {
                    if i >= n_main {
                        return Err(Error::Parse {
                            path: side.clone(),
                            line: 0,
                            msg: format!("index {i} out of range for {n_main} pairs"),
                        });
                    }
                    claimed[i] = true;
                }
                idx
            }
            None => {
                let extra = parse_pairs(&side, &text, tok)?;
                let start = corpus.pairs.len();
                corpus.pairs.extend(extra);
                (start..corpus.pairs.len()).collect()
            }
        };
        if ext == "dev" {
            corpus.dev = idx;
        } else {
            corpus.test = idx;
        }
    }
    corpus.train = (0..n_main).filter(|&i| !claimed[i]).collect();
    corpus.check_splits()?;
    Ok(corpus)
}

/// Writes pairs in the corpus file format.
pub fn write_pairs<'a>(
    path: &Path,
    pairs: impl IntoIterator<Item = &'a (Sentence, Sentence)>,
) -> Result<()> {
    let mut out = String::new();
    for (s, t) in pairs {
        out.push_str(&s.join(" "));
        out.push('\t');
        out.push_str(&t.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn three_lines_three_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.tsv", "a b\tx y\nc\tz\nd e f\tu\n");
        let c = load_corpus(&p, Tokenizer::Whitespace).unwrap();
        assert_eq!(c.pairs.len(), 3);
        assert_eq!(c.train, vec![0, 1, 2]);
        assert_eq!(c.pairs[0], (vec!["a".into(), "b".into()], vec!["x".into(), "y".into()]));
    }

    #[test]
    fn crlf_matches_lf() {
        let dir = tempfile::tempdir().unwrap();
        let lf = "a b\tx y\nc\tz\n";
        let crlf = lf.replace('\n', "\r\n");
        assert_eq!(crlf.as_bytes().iter().filter(|&&b| b == b'\r').count(), 2);
        let a = load_corpus(&write(dir.path(), "lf.tsv", lf), Tokenizer::Whitespace).unwrap();
        let b = load_corpus(&write(dir.path(), "crlf.tsv", &crlf), Tokenizer::Whitespace).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_tab_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.tsv", "a\tb\nno tab here\n");
        match load_corpus(&p, Tokenizer::Whitespace) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.tsv", "");
        assert!(load_corpus(&p, Tokenizer::Whitespace).is_err());
        let q = write(dir.path(), "d.tsv", "a\t \n");
        assert!(load_corpus(&q, Tokenizer::Whitespace).is_err());
    }

    #[test]
    fn companions_by_index_and_by_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.tsv", "a\tx\nb\ty\nc\tz\nd\tw\n");
        write(dir.path(), "c.dev", "1\n3\n");
        write(dir.path(), "c.test", "e f\tv u\n");
        let c = load_corpus(&p, Tokenizer::Whitespace).unwrap();
        assert_eq!(c.train, vec![0, 2]);
        assert_eq!(c.dev, vec![1, 3]);
        assert_eq!(c.test, vec![4]);
        assert_eq!(c.pairs[4].1, vec!["v".to_string(), "u".into()]);
    }

    #[test]
    fn char_tokenizer() {
        assert_eq!(Tokenizer::Char.tokenize("ab c"), vec!["a", "b", "c"]);
        assert!("bpe".parse::<Tokenizer>().is_err());
    }

    fn toy_corpus(n: usize) -> Corpus {
        let pairs = (0..n)
            .map(|i| (vec![format!("s{i}")], vec!["t".to_string(); 1 + i % 7]))
            .collect();
        Corpus::from_pairs(pairs)
    }

    #[test]
    fn budget_covers_whole_corpus() {
        let c = toy_corpus(20);
        let s = c.subsample_by_tokens(10_000, 3).unwrap();
        let mut got = s.train.clone();
        got.sort();
        assert_eq!(got, c.train);
    }

    #[test]
    fn budget_overshoot_is_below_one_sentence() {
        let c = toy_corpus(5000);
        let max_len = 7;
        let s = c.subsample_by_tokens(1600, 1).unwrap();
        let n = s.train_tokens();
        assert!((1600..1600 + max_len).contains(&n), "{n}");
    }

    #[test]
    fn seeds_give_different_subsets() {
        let c = toy_corpus(3000);
        let sets: Vec<Vec<usize>> = (0..5)
            .map(|seed| {
                let mut t = c.subsample_by_tokens(400, seed).unwrap().train;
                t.sort();
                t
            })
            .collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(sets[i], sets[j]);
            }
        }
    }

    proptest! {
        #[test]
        fn smaller_budget_is_subset(b1 in 1usize..300, extra in 0usize..300, seed in 0u64..50) {
            let c = toy_corpus(200);
            let small = c.subsample_by_tokens(b1, seed).unwrap().train;
            let large = c.subsample_by_tokens(b1 + extra, seed).unwrap().train;
            prop_assert!(small.len() <= large.len());
            prop_assert_eq!(&large[..small.len()], &small[..]);
        }

        #[test]
        fn splits_stay_disjoint(budget in 1usize..500, seed in 0u64..20) {
            let mut c = toy_corpus(120);
            c.dev = (100..110).collect();
            c.test = (110..120).collect();
            c.train = (0..100).collect();
            let s = c.subsample_by_tokens(budget, seed).unwrap();
            prop_assert!(s.check_splits().is_ok());
            prop_assert_eq!(s.dev, c.dev);
        }
    }
}
