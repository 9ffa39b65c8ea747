//! Text ingestion: tokenization, BPE, vocabularies and length filtering.

mod bpe;
mod tokenize;
pub(crate) mod vocab;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub use bpe::{learn_bpe, remove_bpe, BpeModel, BPE_MARKER};
pub use tokenize::{detokenize, tokenize, tokenize_with, TokenizerOptions};
pub use vocab::{build_vocab, SpecialIds, Vocabulary, BOS, EOS, MASK, PAD, STANDARD_SPECIALS, UNK};

use crate::error::{Error, Result};

/// Sentences of one language, each a non-empty token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub language: String,
    pub sentences: Vec<Vec<String>>,
}

/// Where BPE merges are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpeMode {
    /// One merge list learned on the concatenation of both languages.
    Joint,
    /// One merge list per language.
    PerLanguage,
}

impl Corpus {
    pub fn new(language: impl Into<String>, sentences: Vec<Vec<String>>) -> Self {
        let sentences = sentences.into_iter().filter(|s| !s.is_empty()).collect();
        Corpus { language: language.into(), sentences }
    }

    /// Tokenizes raw lines; empty lines are dropped.
    pub fn from_lines<'a>(language: &str, lines: impl IntoIterator<Item = &'a str>) -> Self {
        Corpus::new(language, lines.into_iter().map(tokenize).collect())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn concat(language: &str, parts: &[&Corpus]) -> Corpus {
        Corpus {
            language: language.to_string(),
            sentences: parts.iter().flat_map(|c| c.sentences.iter().cloned()).collect(),
        }
    }

    /// Reads raw UTF-8 text, one sentence per line, and tokenizes it.
    pub fn read_raw(path: &Path, language: &str) -> Result<Self> {
        let lines = read_lines(path)?;
        Ok(Corpus::from_lines(language, lines.iter().map(String::as_str)))
    }

    /// Reads an already tokenized file (tokens separated by whitespace).
    pub fn read_tokenized(path: &Path, language: &str) -> Result<Self> {
        let lines = read_lines(path)?;
        Ok(Corpus::new(
            language,
            lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect(),
        ))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for s in &self.sentences {
            writeln!(w, "{}", s.join(" ")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f).lines().collect::<std::io::Result<Vec<_>>>().map_err(|e| Error::io(path, e))
}

/// Keeps sentences of at most `max_len` tokens, in order.
pub fn filter_long(corpus: &Corpus, max_len: usize) -> Result<Corpus> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    Ok(Corpus {
        language: corpus.language.clone(),
        sentences: corpus
            .sentences
            .iter()
            .filter(|s| !s.is_empty() && s.len() <= max_len)
            .cloned()
            .collect(),
    })
}

/// Learns BPE for one or two corpora under the given mode. Returns one model
/// per input corpus (the same model repeated in joint mode).
pub fn learn_bpe_for(mode: BpeMode, corpora: &[&Corpus], n_merges: usize) -> Result<Vec<BpeModel>> {
    match mode {
        BpeMode::Joint => {
            let joint = Corpus::concat("joint", corpora);
            let m = learn_bpe(&joint, n_merges)?;
            Ok(vec![m; corpora.len()])
        }
        BpeMode::PerLanguage => corpora.iter().map(|c| learn_bpe(c, n_merges)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let c = Corpus::new("en", vec![sent(101), sent(100), sent(3)]);
        let f = filter_long(&c, 100).unwrap();
        assert_eq!(f.sentences.iter().map(Vec::len).collect::<Vec<_>>(), vec![100, 3]);
        assert!(filter_long(&Corpus::default(), 100).unwrap().is_empty());
        assert!(filter_long(&c, 0).is_err());
    }

    #[test]
    fn joint_mode_shares_merges() {
        let a = Corpus::from_lines("a", ["xyxy xy"]);
        let b = Corpus::from_lines("b", ["zwzw"]);
        let joint = learn_bpe_for(BpeMode::Joint, &[&a, &b], 5).unwrap();
        assert_eq!(joint[0], joint[1]);
        let sep = learn_bpe_for(BpeMode::PerLanguage, &[&a, &b], 5).unwrap();
        assert_ne!(sep[0], sep[1]);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "Hello, world!\n\nab@@ c\n").unwrap();
        let raw = Corpus::read_raw(&p, "en").unwrap();
        assert_eq!(raw.sentences[0], vec!["Hello", ",", "world", "!"]);
        let tok = Corpus::read_tokenized(&p, "en").unwrap();
        assert_eq!(tok.sentences.len(), 2);
        assert_eq!(tok.sentences[1], vec!["ab@@", "c"]);
        tok.write(&p).unwrap();
        assert_eq!(Corpus::read_tokenized(&p, "en").unwrap(), tok);
    }

    proptest::proptest! {
        #[test]
        fn filtering_is_idempotent(lens in proptest::collection::vec(0usize..20, 0..30), max in 1usize..15) {
            let c = Corpus::new("x", lens.iter().map(|&n| sent(n)).collect());
            let once = filter_long(&c, max).unwrap();
            proptest::prop_assert!(once.sentences.iter().all(|s| s.len() <= max));
            proptest::prop_assert_eq!(filter_long(&once, max).unwrap(), once);
        }
    }
}
