//! Byte-pair encoding over characters within words.
//!
//! Merges never cross word boundaries. On application every subword except
//! the last one of its word gets [`BPE_MARKER`] appended, so joining on the
//! marker restores the original words.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::Corpus;
use crate::error::{Error, Result};

pub const BPE_MARKER: &str = "@@";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    marker: String,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate merge {} {}", pair.0, pair.1)));
            }
        }
        Ok(BpeModel { merges, ranks, marker: BPE_MARKER.to_string() })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }

    /// Splits a single word into subwords (without markers).
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.ranks.get(&key) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Applies the merges to each token and marks non-final subwords.
    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(tokens.len() * 2);
        for tok in tokens {
            let pieces = self.segment_word(tok);
            let last = pieces.len().saturating_sub(1);
            for (i, mut p) in pieces.into_iter().enumerate() {
                if i < last {
                    p.push_str(&self.marker);
                }
                out.push(p);
            }
        }
        out
    }

    pub fn apply_corpus(&self, corpus: &Corpus) -> Corpus {
        Corpus {
            language: corpus.language.clone(),
            sentences: corpus.sentences.iter().map(|s| self.apply(s)).collect(),
        }
    }

    pub fn to_codes_string(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn parse_codes(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        what: "BPE codes",
                        line: i + 1,
                        msg: "expected \"left right\"".into(),
                    })
                }
            }
        }
        BpeModel::new(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_codes_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_codes(&text)
    }
}

/// Joins marked subwords back into words.
pub fn remove_bpe(subwords: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut open = false;
    for sw in subwords {
        if let Some(stem) = sw.strip_suffix(BPE_MARKER) {
            cur.push_str(stem);
            open = true;
        } else {
            cur.push_str(sw);
            out.push(std::mem::take(&mut cur));
            open = false;
        }
    }
    if open {
        out.push(cur);
    }
    out
}

/// Learns up to `n_merges` merges by repeatedly merging the most frequent
/// adjacent symbol pair. Ties go to the lexicographically smallest pair.
pub fn learn_bpe(corpus: &Corpus, n_merges: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut word_freq: BTreeMap<&str, i64> = BTreeMap::new();
    for s in &corpus.sentences {
        for w in s {
            *word_freq.entry(w.as_str()).or_insert(0) += 1;
        }
    }

    let mut interner = Interner::default();
    let mut words: Vec<(Vec<u32>, i64)> = word_freq
        .iter()
        .map(|(w, &f)| (w.chars().map(|c| interner.intern(&c.to_string())).collect(), f))
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, f)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0], p[1]);
            *counts.entry(key).or_insert(0) += f;
            where_.entry(key).or_default().insert(wi);
        }
    }

    let mut merges = Vec::with_capacity(n_merges);
    while merges.len() < n_merges {
        let mut best: Option<((u32, u32), i64)> = None;
        for (&pair, &c) in &counts {
            if c <= 0 {
                continue;
            }
            best = match best {
                None => Some((pair, c)),
                Some((bp, bc)) => {
                    let better = c > bc
                        || (c == bc
                            && (interner.get(pair.0), interner.get(pair.1))
                                < (interner.get(bp.0), interner.get(bp.1)));
                    if better {
                        Some((pair, c))
                    } else {
                        Some((bp, bc))
                    }
                }
            };
        }
        let Some((pair, _)) = best else { break };
        let merged_str = format!("{}{}", interner.get(pair.0), interner.get(pair.1));
        let merged = interner.intern(&merged_str);
        merges.push((interner.get(pair.0).to_string(), interner.get(pair.1).to_string()));

        let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (syms, f) = &mut words[wi];
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                if let Some(c) = counts.get_mut(&key) {
                    *c -= *f;
                }
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                *counts.entry(key).or_insert(0) += *f;
                where_.entry(key).or_default().insert(wi);
            }
        }
        counts.retain(|_, c| *c > 0);
    }
    BpeModel::new(merges)
}

#[derive(Default)]
struct Interner {
    ids: HashMap<String, u32>,
    strs: Vec<String>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.strs.len() as u32;
        self.strs.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        id
    }

    fn get(&self, id: u32) -> &str {
        &self.strs[id as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn corpus(lines: &[&str]) -> Corpus {
        Corpus::from_lines("xx", lines.iter().copied())
    }

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    /// Reference learner: full recount of every pair after each merge.
    fn brute_force_bpe(corpus: &Corpus, n: usize) -> Vec<(String, String)> {
        let mut words: Vec<Vec<String>> = corpus
            .sentences
            .iter()
            .flatten()
            .map(|w| w.chars().map(String::from).collect())
            .collect();
        let mut merges = Vec::new();
        for _ in 0..n {
            let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for w in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0].clone(), p[1].clone())).or_default() += 1;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first max wins ties.
            let Some(best) = counts
                .iter()
                .fold(None::<(&(String, String), usize)>, |acc, (k, &c)| match acc {
                    Some((_, bc)) if bc >= c => acc,
                    _ => Some((k, c)),
                })
                .map(|(k, _)| k.clone())
            else {
                break;
            };
            for w in &mut words {
                let mut out = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == best.0 && w[i + 1] == best.1 {
                        out.push(format!("{}{}", best.0, best.1));
                        i += 2;
                    } else {
                        out.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = out;
            }
            merges.push(best);
        }
        merges
    }

    #[test]
    fn most_frequent_pair_first() {
        let m = learn_bpe(&corpus(&["aa aa ab"]), 1).unwrap();
        assert_eq!(m.merges(), pairs(&[("a", "a")]).as_slice());
        let m = learn_bpe(&corpus(&["ab", "ab", "cd"]), 2).unwrap();
        assert_eq!(m.merges(), pairs(&[("a", "b"), ("c", "d")]).as_slice());
    }

    #[test]
    fn zero_merges_and_exhaustion() {
        assert!(learn_bpe(&corpus(&["hello world"]), 0).unwrap().merges().is_empty());
        // "ab" offers exactly one pair.
        assert_eq!(learn_bpe(&corpus(&["ab"]), 10).unwrap().merges().len(), 1);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = learn_bpe(&corpus(&[]), 3).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn apply_marks_non_final_subwords() {
        let m = BpeModel::new(pairs(&[("a", "b")])).unwrap();
        assert_eq!(m.apply(&["abc".to_string()]), vec!["ab@@", "c"]);
        let none = BpeModel::new(vec![]).unwrap();
        assert_eq!(none.apply(&["hi".to_string()]), vec!["h@@", "i"]);
    }

    #[test]
    fn duplicate_merges_rejected() {
        assert!(BpeModel::new(pairs(&[("a", "b"), ("a", "b")])).is_err());
    }

    #[test]
    fn codes_file_roundtrip() {
        let m = learn_bpe(&corpus(&["lower lowest newer newest"]), 6).unwrap();
        let again = BpeModel::parse_codes(&m.to_codes_string()).unwrap();
        assert_eq!(m, again);
        assert!(BpeModel::parse_codes("a b c\n").is_err());
    }

    #[test]
    fn matches_brute_force_learner() {
        let text = [
            "the lowest newer widest lower low",
            "new news newest wider wide low lower",
            "banana bandana ban anna nab",
        ];
        let c = corpus(&text);
        for n in [0, 1, 5, 20, 200] {
            let fast = learn_bpe(&c, n).unwrap();
            assert_eq!(fast.merges(), brute_force_bpe(&c, n).as_slice(), "n={n}");
        }
    }

    #[test]
    fn deterministic_codes() {
        let c = corpus(&["abra cadabra abracadabra", "alakazam kazam"]);
        let a = learn_bpe(&c, 15).unwrap().to_codes_string();
        let b = learn_bpe(&c, 15).unwrap().to_codes_string();
        assert_eq!(a, b);
    }

    proptest::proptest! {
        #[test]
        fn bpe_roundtrip(text in "\\PC{0,40}", n in 0usize..30) {
            let tokens = tokenize(&text);
            let c = Corpus::from_lines("xx", [text.as_str()]);
            let m = if c.is_empty() { BpeModel::new(vec![]).unwrap() } else { learn_bpe(&c, n).unwrap() };
            proptest::prop_assert_eq!(remove_bpe(&m.apply(&tokens)), tokens);
        }

        #[test]
        fn brute_force_agreement(words in proptest::collection::vec("[abc]{1,5}", 1..12), n in 0usize..12) {
            let line = words.join(" ");
            let c = Corpus::from_lines("xx", [line.as_str()]);
            let fast = learn_bpe(&c, n).unwrap();
            let slow = brute_force_bpe(&c, n);
            proptest::prop_assert_eq!(fast.merges(), slow.as_slice());
        }
    }
}
