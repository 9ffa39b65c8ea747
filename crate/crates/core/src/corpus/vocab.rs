use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Corpus;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const MASK: &str = "<mask>";

/// Special tokens in their reserved order.
pub const STANDARD_SPECIALS: [&str; 5] = [PAD, UNK, BOS, EOS, MASK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpecialIds {
    pub pad: Option<usize>,
    pub unk: Option<usize>,
    pub bos: Option<usize>,
    pub eos: Option<usize>,
    pub mask: Option<usize>,
}

/// Bijective token/id map. Specials occupy ids `0..n_specials`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    counts: Vec<u64>,
    n_specials: usize,
    specials: SpecialIds,
}

impl Vocabulary {
    /// Builds a vocabulary from specials followed by `(token, count)` entries
    /// in the given order.
    pub fn from_entries(specials: &[&str], entries: Vec<(String, u64)>) -> Result<Self> {
        let mut v = Vocabulary {
            id_to_token: Vec::with_capacity(specials.len() + entries.len()),
            token_to_id: HashMap::with_capacity(specials.len() + entries.len()),
            counts: Vec::with_capacity(specials.len() + entries.len()),
            n_specials: specials.len(),
            specials: SpecialIds::default(),
        };
        for s in specials {
            v.push(s.to_string(), 0)?;
        }
        for (t, c) in entries {
            v.push(t, c)?;
        }
        v.specials = SpecialIds {
            pad: v.id(PAD).filter(|&i| i < v.n_specials),
            unk: v.id(UNK).filter(|&i| i < v.n_specials),
            bos: v.id(BOS).filter(|&i| i < v.n_specials),
            eos: v.id(EOS).filter(|&i| i < v.n_specials),
            mask: v.id(MASK).filter(|&i| i < v.n_specials),
        };
        Ok(v)
    }

    fn push(&mut self, token: String, count: u64) -> Result<()> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("invalid token {token:?}")));
        }
        if self.token_to_id.contains_key(&token) {
            return Err(Error::invalid(format!("duplicate token {token:?}")));
        }
        self.token_to_id.insert(token.clone(), self.id_to_token.len());
        self.id_to_token.push(token);
        self.counts.push(count);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_specials(&self) -> usize {
        self.n_specials
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.n_specials
    }

    /// Ids of all regular (non-special) tokens.
    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        self.n_specials..self.len()
    }

    /// Token id, falling back to UNK. Panics if the vocabulary has no UNK.
    pub fn encode(&self, token: &str) -> usize {
        self.id(token)
            .or(self.specials.unk)
            .expect("vocabulary has no <unk> token")
    }

    pub fn encode_all(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t)).collect()
    }

    pub fn decode(&self, id: usize) -> &str {
        self.token(id)
    }

    /// Adds tokens not yet present at the end; existing ids are unchanged.
    pub fn extended_with(&self, entries: impl IntoIterator<Item = (String, u64)>) -> Result<Self> {
        let mut v = self.clone();
        for (t, c) in entries {
            if v.id(&t).is_none() {
                v.push(t, c)?;
            }
        }
        Ok(v)
    }

    /// "token frequency" per line in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.id_to_token.iter().zip(&self.counts) {
            let _ = writeln!(s, "{t} {c}");
        }
        s
    }

    /// Parses the vocabulary file format. Leading lines naming standard
    /// special tokens are treated as specials.
    pub fn parse(text: &str) -> Result<Self> {
        let mut specials = Vec::new();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, cnt) = line.rsplit_once(' ').ok_or_else(|| Error::Parse {
                what: "vocabulary",
                line: i + 1,
                msg: "expected \"token frequency\"".into(),
            })?;
            let cnt: u64 = cnt.parse().map_err(|_| Error::Parse {
                what: "vocabulary",
                line: i + 1,
                msg: format!("bad frequency {cnt:?}"),
            })?;
            if entries.is_empty() && STANDARD_SPECIALS.contains(&tok) {
                specials.push(tok.to_string());
            } else {
                entries.push((tok.to_string(), cnt));
            }
        }
        let specials: Vec<&str> = specials.iter().map(String::as_str).collect();
        Vocabulary::from_entries(&specials, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// SHA-256 over the token list (frequencies excluded).
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.id_to_token {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }
}

/// Vocabulary of tokens with frequency `>= min_count`, sorted by descending
/// frequency then lexicographically, with `specials` prepended.
pub fn build_vocab(corpus: &Corpus, min_count: u64, specials: &[&str]) -> Result<Vocabulary> {
    if specials.is_empty() {
        return Err(Error::invalid("specials must be non-empty"));
    }
    Vocabulary::from_entries(specials, count_tokens(corpus, min_count, specials))
}

/// Frequency-sorted token counts, excluding `skip`.
pub(crate) fn count_tokens(corpus: &Corpus, min_count: u64, skip: &[&str]) -> Vec<(String, u64)> {
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for s in &corpus.sentences {
        for t in s {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, u64)> = freq
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !skip.contains(t))
        .map(|(t, c)| (t.to_string(), c))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Corpus {
        Corpus::from_lines("xx", ["a a b"])
    }

    #[test]
    fn frequency_order_after_specials() {
        let v = build_vocab(&corpus(), 1, &[PAD, UNK]).unwrap();
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id(UNK), Some(1));
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.id("b"), Some(3));
        assert_eq!(v.specials().unk, Some(1));
        assert_eq!(v.specials().mask, None);
    }

    #[test]
    fn min_count_maps_rare_tokens_to_unk() {
        let v = build_vocab(&corpus(), 3, &[PAD, UNK]).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.encode("a"), 1);
        assert_eq!(v.encode("b"), 1);
    }

    #[test]
    fn specials_must_be_distinct_and_present() {
        assert!(build_vocab(&corpus(), 1, &[]).is_err());
        assert!(build_vocab(&corpus(), 1, &[PAD, PAD]).is_err());
    }

    #[test]
    fn lexicographic_tie_break() {
        let c = Corpus::from_lines("xx", ["z y x z y x w"]);
        let v = build_vocab(&c, 1, &[UNK]).unwrap();
        assert_eq!(&v.tokens()[1..], ["x", "y", "z", "w"]);
    }

    #[test]
    fn bijective_over_all_ids() {
        let c = Corpus::from_lines("xx", ["the cat sat on the mat", "a dog"]);
        let v = build_vocab(&c, 1, &STANDARD_SPECIALS).unwrap();
        for id in 0..v.len() {
            assert_eq!(v.id(v.token(id)), Some(id));
        }
        for t in v.tokens() {
            assert_eq!(v.decode(v.encode(t)), t);
        }
    }

    #[test]
    fn file_roundtrip_and_extension() {
        let c = Corpus::from_lines("xx", ["b b a c"]);
        let v = build_vocab(&c, 1, &STANDARD_SPECIALS).unwrap();
        let back = Vocabulary::parse(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        let ext = v.extended_with([("d".to_string(), 1), ("a".to_string(), 9)]).unwrap();
        assert_eq!(ext.len(), v.len() + 1);
        assert_eq!(ext.id("a"), v.id("a"));
        assert_eq!(ext.content_hash() == v.content_hash(), false);
    }
}
