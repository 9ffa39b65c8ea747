//! Synthetic cipher language pairs with a known gold lexicon.
//!
//! Both languages share one Zipfian bigram model over `vocab_size` word
//! types. L1 spells word `i` in Latin syllables; L2 spells the image of `i`
//! under a seeded permutation in Cyrillic, except for anchor words, which
//! keep their Latin form in both languages. The two monolingual corpora are
//! independent samples, so they are comparable but not parallel.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::vecmap::{BilingualDictionary, Provenance};

const CONSONANTS: [(char, char); 14] = [
    ('b', 'б'),
    ('d', 'д'),
    ('f', 'ф'),
    ('g', 'г'),
    ('k', 'к'),
    ('l', 'л'),
    ('m', 'м'),
    ('n', 'н'),
    ('p', 'п'),
    ('r', 'р'),
    ('s', 'с'),
    ('t', 'т'),
    ('v', 'в'),
    ('z', 'з'),
];
const VOWELS: [(char, char); 5] = [('a', 'а'), ('e', 'е'), ('i', 'и'), ('o', 'о'), ('u', 'у')];

#[derive(Debug, Clone, PartialEq)]
pub struct CipherSpec {
    pub vocab_size: usize,
    pub sentences: usize,
    /// Sentence lengths are uniform on `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of word types spelled identically in both languages.
    pub anchor_fraction: f64,
    pub zipf_exponent: f64,
    /// Successors per word in the bigram table.
    pub successors: usize,
    /// Probability that the next word comes from the bigram table rather
    /// than the unigram distribution.
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for CipherSpec {
    fn default() -> Self {
        CipherSpec {
            vocab_size: 1000,
            sentences: 50_000,
            min_len: 4,
            max_len: 12,
            anchor_fraction: 0.05,
            zipf_exponent: 0.7,
            successors: 8,
            follow_prob: 0.9,
            seed: 1,
        }
    }
}

impl CipherSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vocab_size < 2 {
            errs.push("vocab_size must be >= 2".to_string());
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            errs.push("need 1 <= min_len <= max_len".to_string());
        }
        if !(self.anchor_fraction > 0.0 && self.anchor_fraction <= 1.0) {
            errs.push("anchor_fraction must be in (0, 1]".to_string());
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            errs.push("zipf_exponent must be finite and >= 0".to_string());
        }
        if self.successors < 1 {
            errs.push("successors must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.follow_prob) {
            errs.push("follow_prob must be in [0, 1]".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Latin spelling of word `i`: base-70 syllables, at least two.
pub fn latin_form(i: usize) -> String {
    spell(i, false)
}

fn spell(mut i: usize, cyrillic: bool) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut syllables = Vec::new();
    loop {
        syllables.push(i % base);
        i /= base;
        if i == 0 && syllables.len() >= 2 {
            break;
        }
    }
    let mut out = String::new();
    for s in syllables.into_iter().rev() {
        let (c, v) = (CONSONANTS[s / VOWELS.len()], VOWELS[s % VOWELS.len()]);
        if cyrillic {
            out.push(c.1);
            out.push(v.1);
        } else {
            out.push(c.0);
            out.push(v.0);
        }
    }
    out
}

/// A generated language pair: word forms, the substitution, and the shared
/// bigram model.
#[derive(Debug, Clone)]
pub struct Cipher {
    pub spec: CipherSpec,
    l1_words: Vec<String>,
    l2_words: Vec<String>,
    anchors: Vec<bool>,
    unigram: WeightedIndex<f64>,
    successors: Vec<(Vec<usize>, WeightedIndex<f64>)>,
}

impl Cipher {
    pub fn new(spec: &CipherSpec) -> Result<Self> {
        spec.validate()?;
        let v = spec.vocab_size;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let zipf: Vec<f64> = (0..v).map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent)).collect();
        let unigram = WeightedIndex::new(&zipf).expect("positive weights");

        let n_anchors = ((spec.anchor_fraction * v as f64).round() as usize).clamp(1, v);
        let mut order: Vec<usize> = (0..v).collect();
        order.shuffle(&mut rng);
        let mut anchors = vec![false; v];
        order[..n_anchors].iter().for_each(|&i| anchors[i] = true);

        let mut images: Vec<usize> = (0..v).filter(|&i| !anchors[i]).collect();
        images.shuffle(&mut rng);
        let mut images = images.into_iter();
        let l1_words: Vec<String> = (0..v).map(latin_form).collect();
        let l2_words = (0..v)
            .map(|i| if anchors[i] { l1_words[i].clone() } else { spell(images.next().expect("bijection"), true) })
            .collect();

        let succ_weights: Vec<f64> = (0..spec.successors).map(|r| 1.0 / (r + 1) as f64).collect();
        let successors = (0..v)
            .map(|_| {
                let next: Vec<usize> = (0..spec.successors).map(|_| unigram.sample(&mut rng)).collect();
                (next, WeightedIndex::new(&succ_weights).expect("positive weights"))
            })
            .collect();
        Ok(Cipher { spec: spec.clone(), l1_words, l2_words, anchors, unigram, successors })
    }

    pub fn vocab_size(&self) -> usize {
        self.l1_words.len()
    }

    pub fn l1_word(&self, i: usize) -> &str {
        &self.l1_words[i]
    }

    pub fn l2_word(&self, i: usize) -> &str {
        &self.l2_words[i]
    }

    pub fn is_anchor(&self, i: usize) -> bool {
        self.anchors[i]
    }

    /// Samples `n` sentences as word ids.
    pub fn sample_ids(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
                let mut s = Vec::with_capacity(len);
                let mut w = self.unigram.sample(rng);
                s.push(w);
                while s.len() < len {
                    w = if rng.random::<f64>() < self.spec.follow_prob {
                        let (next, dist) = &self.successors[w];
                        next[dist.sample(rng)]
                    } else {
                        self.unigram.sample(rng)
                    };
                    s.push(w);
                }
                s
            })
            .collect()
    }

    fn render(&self, ids: &[Vec<usize>], words: &[String], lang: &str) -> Corpus {
        Corpus::new(lang, ids.iter().map(|s| s.iter().map(|&i| words[i].clone()).collect()).collect())
    }

    pub fn render_l1(&self, ids: &[Vec<usize>]) -> Corpus {
        self.render(ids, &self.l1_words, "l1")
    }

    pub fn render_l2(&self, ids: &[Vec<usize>]) -> Corpus {
        self.render(ids, &self.l2_words, "l2")
    }

    /// Word-wise L1 → L2 substitution. Unknown words pass through.
    pub fn encipher(&self, corpus: &Corpus) -> Corpus {
        self.substitute(corpus, &self.l1_words, &self.l2_words, "l2")
    }

    /// Word-wise L2 → L1 substitution. Unknown words pass through.
    pub fn decipher(&self, corpus: &Corpus) -> Corpus {
        self.substitute(corpus, &self.l2_words, &self.l1_words, "l1")
    }

    fn substitute(&self, corpus: &Corpus, from: &[String], to: &[String], lang: &str) -> Corpus {
        let table: std::collections::HashMap<&str, &str> =
            from.iter().zip(to).map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let sentences = corpus
            .sentences
            .iter()
            .map(|s| s.iter().map(|w| table.get(w.as_str()).map_or_else(|| w.clone(), |t| t.to_string())).collect())
            .collect();
        Corpus::new(lang, sentences)
    }

    /// The full L1 → L2 word table, anchors included.
    pub fn gold(&self) -> BilingualDictionary {
        BilingualDictionary::new(self.l1_words.iter().cloned().zip(self.l2_words.iter().cloned()), Provenance::Gold)
    }

    /// Two independent monolingual samples of `spec.sentences` each.
    pub fn monolingual(&self) -> (Corpus, Corpus) {
        let mut r1 = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x11);
        let mut r2 = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x22);
        let a = self.sample_ids(self.spec.sentences, &mut r1);
        let b = self.sample_ids(self.spec.sentences, &mut r2);
        (self.render_l1(&a), self.render_l2(&b))
    }

    /// `n` parallel sentence pairs drawn from a stream selected by `stream`.
    pub fn parallel(&self, n: usize, stream: u64) -> (Corpus, Corpus) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5151 ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let ids = self.sample_ids(n, &mut rng);
        (self.render_l1(&ids), self.render_l2(&ids))
    }
}

/// Generates two comparable monolingual corpora and their gold dictionary.
pub fn gen_cipher_pair(spec: &CipherSpec) -> Result<(Corpus, Corpus, BilingualDictionary)> {
    let c = Cipher::new(spec)?;
    let (a, b) = c.monolingual();
    Ok((a, b, c.gold()))
}
