//! Synthetic multilingual families.
//!
//! Every language renders the same latent sentences: each latent word gets a
//! surface form through a per-language bijection, and a handful of
//! phrase-level reordering switches (each moving a word by at most three
//! positions) fix the word order. The shared target side ("en") is the latent
//! order itself. Word vectors are aligned across languages: one latent vector
//! per word, slightly rotated and perturbed per language.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::corpus::{write_pairs, Corpus, Sentence};
use super::embeddings::{write_embeddings, WordVectors};
use super::{FamilyManifest, LanguageEntry, PIVOT_LANGUAGE};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::vocab::RESERVED_TOKENS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticFamilySpec {
    pub n_sources: usize,
    pub n_targets: usize,
    /// Number of latent words.
    pub latent_vocab: usize,
    /// Surface words per language; the extra ones are alternative forms.
    pub vocab_size: usize,
    pub source_sentences: usize,
    pub target_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
    pub embedding_dim: usize,
    /// Size of the per-language perturbation before re-orthogonalizing.
    pub rotation: f64,
    /// Standard deviation of per-word noise, relative to unit-norm vectors.
    pub noise: f64,
    /// Every language is the latent language itself.
    pub identity: bool,
    /// Targets get unaligned vectors and reversed word order instead.
    pub scrambled_targets: bool,
    pub seed: u64,
}

impl Default for SyntheticFamilySpec {
    fn default() -> Self {
        SyntheticFamilySpec {
            n_sources: 6,
            n_targets: 2,
            latent_vocab: 300,
            vocab_size: 300,
            source_sentences: 20_000,
            target_sentences: 24_000,
            dev_sentences: 200,
            test_sentences: 200,
            embedding_dim: 16,
            rotation: 0.1,
            noise: 0.6,
            identity: false,
            scrambled_targets: false,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Adv,
}

const CATEGORY_SHARE: [(Category, f64); 6] = [
    (Category::Det, 0.08),
    (Category::Adj, 0.2),
    (Category::Noun, 0.34),
    (Category::Verb, 0.2),
    (Category::Prep, 0.09),
    (Category::Adv, 0.09),
];

/// Word-order switches of one language.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderRules {
    /// noun adjective
    pub adj_after_noun: bool,
    /// noun determiner
    pub det_after_noun: bool,
    /// subject object verb
    pub verb_final: bool,
    /// noun-phrase postposition
    pub postpositions: bool,
    /// adverb before the subject
    pub adverb_initial: bool,
    /// whole sentence reversed (scrambled languages only)
    pub reversed: bool,
}

impl OrderRules {
    const N_SWITCHES: u32 = 5;

    fn from_bits(bits: u32) -> Self {
        OrderRules {
            adj_after_noun: bits & 1 != 0,
            det_after_noun: bits & 2 != 0,
            verb_final: bits & 4 != 0,
            postpositions: bits & 8 != 0,
            adverb_initial: bits & 16 != 0,
            reversed: false,
        }
    }
}

#[derive(Clone, Debug)]
struct NounPhrase {
    det: usize,
    adj: Option<usize>,
    noun: usize,
}

#[derive(Clone, Debug)]
struct LatentSentence {
    subject: NounPhrase,
    verb: usize,
    adverb: Option<usize>,
    object: NounPhrase,
    pp: Option<(usize, NounPhrase)>,
}

impl NounPhrase {
    fn render(&self, r: &OrderRules, out: &mut Vec<usize>) {
        let mut core = Vec::with_capacity(2);
        match (self.adj, r.adj_after_noun) {
            (Some(a), false) => core.extend([a, self.noun]),
            (Some(a), true) => core.extend([self.noun, a]),
            (None, _) => core.push(self.noun),
        }
        if r.det_after_noun {
            out.extend(core);
            out.push(self.det);
        } else {
            out.push(self.det);
            out.extend(core);
        }
    }
}

impl LatentSentence {
    fn render(&self, r: &OrderRules) -> Vec<usize> {
        let mut out = Vec::with_capacity(12);
        match (self.adverb, r.adverb_initial) {
            (Some(a), true) => {
                out.push(a);
                self.subject.render(r, &mut out);
            }
            (Some(a), false) => {
                self.subject.render(r, &mut out);
                out.push(a);
            }
            (None, _) => self.subject.render(r, &mut out),
        }
        if r.verb_final {
            self.object.render(r, &mut out);
            out.push(self.verb);
        } else {
            out.push(self.verb);
            self.object.render(r, &mut out);
        }
        if let Some((p, np)) = &self.pp {
            if r.postpositions {
                np.render(r, &mut out);
                out.push(*p);
            } else {
                out.push(*p);
                np.render(r, &mut out);
            }
        }
        if r.reversed {
            out.reverse();
        }
        out
    }
}

/// Latent lexicon: words grouped by category, with Zipfian frequencies.
struct Lexicon {
    by_category: BTreeMap<Category, Vec<usize>>,
    category_of: Vec<Category>,
}

impl Lexicon {
    fn new(latent_vocab: usize) -> Result<Self> {
        if latent_vocab < CATEGORY_SHARE.len() * 2 {
            return Err(Error::InvalidArgument(format!(
                "latent_vocab must be at least {}",
                CATEGORY_SHARE.len() * 2
            )));
        }
        let mut counts: Vec<usize> = CATEGORY_SHARE
            .iter()
            .map(|(_, s)| ((s * latent_vocab as f64) as usize).max(2))
            .collect();
        let others: usize = counts.iter().sum::<usize>() - counts[2];
        counts[2] = latent_vocab - others;
        let mut by_category = BTreeMap::new();
        let mut category_of = Vec::with_capacity(latent_vocab);
        for ((c, _), n) in CATEGORY_SHARE.iter().zip(counts) {
            let start = category_of.len();
            by_category.insert(*c, (start..start + n).collect::<Vec<_>>());
            category_of.extend(std::iter::repeat_n(*c, n));
        }
        debug_assert_eq!(category_of.len(), latent_vocab);
        Ok(Lexicon {
            by_category,
            category_of,
        })
    }

    fn draw(&self, c: Category, rng: &mut impl Rng) -> usize {
        let words = &self.by_category[&c];
        let weights: f64 = (1..=words.len()).map(|r| 1.0 / r as f64).sum();
        let mut u = rng.random::<f64>() * weights;
        for (r, &w) in words.iter().enumerate() {
            u -= 1.0 / (r + 1) as f64;
            if u <= 0.0 {
                return w;
            }
        }
        *words.last().unwrap()
    }

    fn noun_phrase(&self, rng: &mut impl Rng) -> NounPhrase {
        NounPhrase {
            det: self.draw(Category::Det, rng),
            adj: rng.random_bool(0.5).then(|| self.draw(Category::Adj, rng)),
            noun: self.draw(Category::Noun, rng),
        }
    }

    fn sentence(&self, rng: &mut impl Rng) -> LatentSentence {
        LatentSentence {
            subject: self.noun_phrase(rng),
            verb: self.draw(Category::Verb, rng),
            adverb: rng.random_bool(0.3).then(|| self.draw(Category::Adv, rng)),
            object: self.noun_phrase(rng),
            pp: rng
                .random_bool(0.4)
                .then(|| (self.draw(Category::Prep, rng), self.noun_phrase(rng))),
        }
    }
}

pub fn latent_word(w: usize) -> String {
    format!("w{w}")
}

/// Ground truth of one generated language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageTruth {
    pub rules: OrderRules,
    pub scrambled: bool,
    /// surface form → latent ("en") word
    pub lexicon: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub categories: BTreeMap<String, Category>,
    pub languages: BTreeMap<String, LanguageTruth>,
}

pub struct GeneratedLanguage {
    pub name: String,
    pub corpus: Corpus,
    pub vectors: WordVectors,
}

pub struct GeneratedFamily {
    pub spec: SyntheticFamilySpec,
    pub sources: Vec<GeneratedLanguage>,
    pub targets: Vec<GeneratedLanguage>,
    pub pivot: WordVectors,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Orthogonal matrix near the identity: Gram-Schmidt on `I + scale·G`.
fn near_identity_rotation(d: usize, scale: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let g = gaussian(rng, d * d, scale / (d as f64).sqrt());
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| g[i * d + j] + if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for j in 0..d {
        for k in 0..j {
            let dot: f64 = cols[j].iter().zip(&cols[k]).map(|(a, b)| a * b).sum();
            let prev = cols[k].clone();
            cols[j].iter_mut().zip(&prev).for_each(|(a, b)| *a -= dot * b);
        }
        normalize(&mut cols[j]);
    }
    cols
}

fn rotate(cols: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            out[i] += c[i] * v[j];
        }
    }
    out
}

fn check(spec: &SyntheticFamilySpec) -> Result<()> {
    let bad = |m: String| Err(Error::InvalidArgument(m));
    if spec.vocab_size < spec.latent_vocab {
        return bad(format!(
            "vocab_size {} is below latent_vocab {}",
            spec.vocab_size, spec.latent_vocab
        ));
    }
    if spec.n_sources == 0 {
        return bad("a family needs at least one source language".into());
    }
    if spec.embedding_dim == 0 || spec.source_sentences == 0 {
        return bad("embedding_dim and source_sentences must be positive".into());
    }
    if spec.noise < 0.0 || spec.rotation < 0.0 {
        return bad("noise and rotation must be non-negative".into());
    }
    Ok(())
}

/// Distinct word-order rule sets: sources first, then targets, never
/// repeating a combination while unused ones remain.
fn assign_rules(n: usize, rng: &mut impl Rng) -> Vec<OrderRules> {
    let mut combos: Vec<u32> = (1..(1 << OrderRules::N_SWITCHES)).collect();
    combos.shuffle(rng);
    (0..n)
        .map(|i| OrderRules::from_bits(combos[i % combos.len()]))
        .collect()
}

pub fn generate_family(spec: &SyntheticFamilySpec) -> Result<GeneratedFamily> {
    check(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lex = Lexicon::new(spec.latent_vocab)?;
    let d = spec.embedding_dim;

    let n_train = spec.source_sentences.max(spec.target_sentences);
    let total = n_train + spec.dev_sentences + spec.test_sentences;
    let latent: Vec<LatentSentence> = (0..total).map(|_| lex.sentence(&mut rng)).collect();

    let centroid: BTreeMap<Category, Vec<f64>> = CATEGORY_SHARE
        .iter()
        .map(|(c, _)| (*c, gaussian(&mut rng, d, 0.6)))
        .collect();
    let base: Vec<Vec<f64>> = (0..spec.latent_vocab)
        .map(|w| {
            let mut v = gaussian(&mut rng, d, 1.0);
            v.iter_mut()
                .zip(&centroid[&lex.category_of[w]])
                .for_each(|(a, c)| *a += c);
            normalize(&mut v);
            v
        })
        .collect();
    let reserved: Vec<Vec<f64>> = RESERVED_TOKENS
        .iter()
        .map(|_| {
            let mut v = gaussian(&mut rng, d, 1.0);
            normalize(&mut v);
            v
        })
        .collect();

    let pivot = {
        let mut words: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        words.extend((0..spec.latent_vocab).map(latent_word));
        let data = reserved.iter().chain(&base).flatten().copied().collect();
        WordVectors {
            vectors: Tensor::new(vec![words.len(), d], data)?,
            words,
        }
    };

    let n_lang = spec.n_sources + spec.n_targets;
    let rules = assign_rules(n_lang, &mut rng);
    let mut truth = GroundTruth {
        categories: (0..spec.latent_vocab)
            .map(|w| (latent_word(w), lex.category_of[w]))
            .collect(),
        languages: BTreeMap::new(),
    };
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for k in 0..n_lang {
        let is_target = k >= spec.n_sources;
        let name = if is_target {
            format!("tgt{}", k - spec.n_sources)
        } else {
            format!("src{k}")
        };
        let scrambled = is_target && spec.scrambled_targets && !spec.identity;
        let mut lrng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1)));
        let mut order_rules = if spec.identity { OrderRules::default() } else { rules[k] };
        if scrambled {
            order_rules = OrderRules {
                reversed: true,
                ..Default::default()
            };
        }

        // surface forms: form j of latent word w; extra forms are alternates
        let mut perm: Vec<usize> = (0..spec.vocab_size).collect();
        if !spec.identity {
            perm.shuffle(&mut lrng);
        }
        let surface = |j: usize| {
            if spec.identity && j < spec.latent_vocab {
                latent_word(j)
            } else {
                format!("{name}_{}", perm[j])
            }
        };
        let forms: Vec<Vec<String>> = (0..spec.latent_vocab)
            .map(|w| {
                (w..spec.vocab_size)
                    .step_by(spec.latent_vocab)
                    .map(surface)
                    .collect()
            })
            .collect();

        let rot = near_identity_rotation(d, spec.rotation, &mut lrng);
        let mut words: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut data: Vec<f64> = reserved.iter().flatten().copied().collect();
        let mut truth_lex = BTreeMap::new();
        for j in 0..spec.vocab_size {
            let w = j % spec.latent_vocab;
            let mut v = if scrambled {
                gaussian(&mut lrng, d, 1.0)
            } else if spec.identity {
                base[w].clone()
            } else {
                let mut v = rotate(&rot, &base[w]);
                let noise = gaussian(&mut lrng, d, spec.noise / (d as f64).sqrt());
                v.iter_mut().zip(noise).for_each(|(a, n)| *a += n);
                v
            };
            normalize(&mut v);
            let s = surface(j);
            truth_lex.insert(s.clone(), latent_word(w));
            words.push(s);
            data.extend(v);
        }
        let vectors = WordVectors {
            vectors: Tensor::new(vec![words.len(), d], data)?,
            words,
        };

        let n_k = if is_target {
            spec.target_sentences
        } else {
            spec.source_sentences
        };
        let render = |s: &LatentSentence, rng: &mut ChaCha8Rng| -> (Sentence, Sentence) {
            let src = s
                .render(&order_rules)
                .into_iter()
                .map(|w| {
                    let f = &forms[w];
                    f[if f.len() > 1 { rng.random_range(0..f.len()) } else { 0 }].clone()
                })
                .collect();
            let tgt = s.render(&OrderRules::default()).into_iter().map(latent_word).collect();
            (src, tgt)
        };
        let mut pairs = Vec::with_capacity(n_k + spec.dev_sentences + spec.test_sentences);
        let held_out = &latent[n_train..];
        for s in latent[..n_k].iter().chain(held_out) {
            pairs.push(render(s, &mut lrng));
        }
        let corpus = Corpus {
            train: (0..n_k).collect(),
            dev: (n_k..n_k + spec.dev_sentences).collect(),
            test: (n_k + spec.dev_sentences..pairs.len()).collect(),
            pairs,
        };
        truth.languages.insert(
            name.clone(),
            LanguageTruth {
                rules: order_rules,
                scrambled,
                lexicon: truth_lex,
            },
        );
        let lang = GeneratedLanguage {
            name,
            corpus,
            vectors,
        };
        if is_target {
            targets.push(lang);
        } else {
            sources.push(lang);
        }
    }
    Ok(GeneratedFamily {
        spec: spec.clone(),
        sources,
        targets,
        pivot,
        truth,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

impl GeneratedFamily {
    /// Writes corpora, word vectors, ground truth and `manifest.json` to `dir`.
    pub fn write(&self, dir: &Path) -> Result<FamilyManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pivot_file = format!("{PIVOT_LANGUAGE}.vec");
        write_embeddings(&dir.join(&pivot_file), &self.pivot)?;
        let mut entry = |lang: &GeneratedLanguage| -> Result<LanguageEntry> {
            let c = &lang.corpus;
            let corpus = format!("{}.tsv", lang.name);
            let embeddings = format!("{}.vec", lang.name);
            write_pairs(&dir.join(&corpus), c.split(&c.train))?;
            write_pairs(&dir.join(format!("{}.dev", lang.name)), c.split(&c.dev))?;
            write_pairs(&dir.join(format!("{}.test", lang.name)), c.split(&c.test))?;
            write_embeddings(&dir.join(&embeddings), &lang.vectors)?;
            Ok(LanguageEntry {
                name: lang.name.clone(),
                corpus,
                embeddings,
                train_pairs: c.train.len(),
                dev_pairs: c.dev.len(),
                test_pairs: c.test.len(),
            })
        };
        let sources = self.sources.iter().map(&mut entry).collect::<Result<Vec<_>>>()?;
        let targets = self.targets.iter().map(&mut entry).collect::<Result<Vec<_>>>()?;
        let manifest = FamilyManifest {
            target_language: PIVOT_LANGUAGE.to_string(),
            pivot_embeddings: pivot_file,
            sources,
            targets,
            tokenizer: Default::default(),
            ground_truth: Some("ground_truth.json".into()),
            seed: Some(self.spec.seed),
            synthetic: Some(self.spec.clone()),
        };
        write_json(&dir.join("ground_truth.json"), &self.truth)?;
        write_json(&dir.join(super::MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SyntheticFamilySpec {
        SyntheticFamilySpec {
            n_sources: 2,
            n_targets: 1,
            latent_vocab: 24,
            vocab_size: 30,
            source_sentences: 50,
            target_sentences: 40,
            dev_sentences: 5,
            test_sentences: 5,
            embedding_dim: 8,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn identity_languages_share_corpora() {
        let spec = SyntheticFamilySpec {
            identity: true,
            vocab_size: 24,
            ..tiny(3)
        };
        let f = generate_family(&spec).unwrap();
        assert_eq!(f.sources[0].corpus, f.sources[1].corpus);
        for (s, t) in &f.sources[0].corpus.pairs {
            assert_eq!(s, t);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_family(&tiny(5)).unwrap().write(a.path()).unwrap();
        generate_family(&tiny(5)).unwrap().write(b.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(names.len() >= 12);
        for n in names {
            let x = fs::read(a.path().join(&n)).unwrap();
            let y = fs::read(b.path().join(&n)).unwrap();
            assert_eq!(x, y, "{n:?}");
        }
        generate_family(&tiny(6)).unwrap().write(b.path()).unwrap();
        assert_ne!(
            fs::read(a.path().join("src0.tsv")).unwrap(),
            fs::read(b.path().join("src0.tsv")).unwrap()
        );
    }

    #[test]
    fn small_vocab_rejected() {
        let spec = SyntheticFamilySpec {
            vocab_size: 10,
            ..tiny(1)
        };
        assert!(generate_family(&spec).is_err());
    }

    #[test]
    fn sentences_follow_ground_truth() {
        let f = generate_family(&tiny(7)).unwrap();
        for lang in f.sources.iter().chain(&f.targets) {
            let t = &f.truth.languages[&lang.name];
            for (s, e) in &lang.corpus.pairs {
                assert_eq!(s.len(), e.len());
                let mut mapped: Vec<&String> = s.iter().map(|w| &t.lexicon[w]).collect();
                let mut en: Vec<&String> = e.iter().collect();
                mapped.sort();
                en.sort();
                assert_eq!(mapped, en);
            }
        }
    }

    #[test]
    fn reordering_displacement_bounded() {
        let lex = Lexicon::new(24).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let s = lex.sentence(&mut rng);
            let en = s.render(&OrderRules::default());
            for bits in 0..32 {
                let out = s.render(&OrderRules::from_bits(bits));
                assert_eq!(out.len(), en.len());
                for (i, w) in en.iter().enumerate() {
                    let j = out.iter().position(|x| x == w).unwrap();
                    let dup = en.iter().filter(|x| *x == w).count() > 1;
                    if !dup {
                        assert!(i.abs_diff(j) <= 3, "bits {bits}: {en:?} -> {out:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = near_identity_rotation(6, 0.2, &mut rng);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = r[i].iter().zip(&r[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
            assert!(r[i][i] > 0.8);
        }
    }

    #[test]
    fn aligned_vectors_stay_close() {
        let f = generate_family(&SyntheticFamilySpec { noise: 0.1, ..tiny(9) }).unwrap();
        let t = &f.truth.languages["src0"];
        let lang = &f.sources[0];
        for (i, w) in lang.vectors.words.iter().enumerate().skip(4) {
            let p = f.pivot.position(&t.lexicon[w]).unwrap();
            let cos: f64 = lang
                .vectors
                .vectors
                .row(i)
                .iter()
                .zip(f.pivot.vectors.row(p))
                .map(|(a, b)| a * b)
                .sum();
            assert!(cos > 0.8, "{w}: {cos}");
        }
    }
}
