use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BleuConfig {
    pub max_n: usize,
    /// Add-one smoothing of the precisions of orders two and up.
    pub smoothing: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_n: 4,
            smoothing: true,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU in `[0, 100]`: geometric mean of clipped n-gram
/// precisions times the brevity penalty.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], cfg: BleuConfig) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs at least one hypothesis".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if cfg.max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be at least 1".into()));
    }
    let mut matches = vec![0usize; cfg.max_n];
    let mut totals = vec![0usize; cfg.max_n];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=cfg.max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut log_p = 0.0;
    for n in 1..=cfg.max_n {
        let (m, t) = (matches[n - 1] as f64, totals[n - 1] as f64);
        let p = if n >= 2 && cfg.smoothing {
            (m + 1.0) / (t + 1.0)
        } else if t == 0.0 {
            0.0
        } else {
            m / t
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_p += p.ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_p / cfg.max_n as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(t: &str) -> Vec<String> {
        t.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_is_hundred() {
        let h = vec![s("a b c d e"), s("x")];
        assert_eq!(bleu(&h, &h, BleuConfig::default()).unwrap(), 100.0);
    }

    #[test]
    fn the_cat_example() {
        let cfg = BleuConfig {
            max_n: 2,
            smoothing: true,
        };
        let b = bleu(&[s("the cat")], &[s("the cat sat")], cfg).unwrap();
        assert!((b - 100.0 * (-0.5f64).exp()).abs() < 1e-9, "{b}");
        let exact = BleuConfig { smoothing: false, ..cfg };
        assert!((bleu(&[s("the cat")], &[s("the cat sat")], exact).unwrap() - b).abs() < 1e-12);
    }

    #[test]
    fn disjoint_vocabulary_below_one() {
        let b = bleu(&[s("a b c d")], &[s("w x y z")], BleuConfig::default()).unwrap();
        assert!(b < 1.0);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn clipping_counts() {
        let cfg = BleuConfig {
            max_n: 1,
            smoothing: false,
        };
        // 2 of 4 unigrams survive clipping, lengths equal
        let b = bleu(&[s("the the the the")], &[s("the cat the mat")], cfg).unwrap();
        assert!((b - 50.0).abs() < 1e-12);
    }

    #[test]
    fn bad_input_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(bleu(&empty, &empty, BleuConfig::default()).is_err());
        assert!(bleu(&[s("a")], &[s("a"), s("b")], BleuConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            pairs in proptest::collection::vec(
                (proptest::collection::vec(0u8..6, 0..8), proptest::collection::vec(0u8..6, 1..8)),
                1..10,
            ),
            rot in 0usize..10,
        ) {
            let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let k = rot % pairs.len();
            let mut h2 = h.clone();
            let mut r2 = r.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let a = bleu(&h, &r, BleuConfig::default()).unwrap();
            let b = bleu(&h2, &r2, BleuConfig::default()).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=100.0).contains(&a));
        }

        #[test]
        fn self_bleu_is_hundred(h in proptest::collection::vec(proptest::collection::vec(0u8..5, 1..9), 1..6)) {
            prop_assert_eq!(bleu(&h, &h, BleuConfig::default()).unwrap(), 100.0);
        }
    }
}
