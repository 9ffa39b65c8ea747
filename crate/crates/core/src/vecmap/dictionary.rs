use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Seed,
    Induced,
    Gold,
}

/// Ordered list of distinct (source, target) token pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilingualDictionary {
    pairs: Vec<(String, String)>,
    pub provenance: Provenance,
}

impl BilingualDictionary {
    /// Duplicate pairs are dropped, first occurrence wins.
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>, provenance: Provenance) -> Self {
        let mut seen = HashSet::new();
        let pairs = pairs.into_iter().filter(|p| seen.insert(p.clone())).collect();
        BilingualDictionary { pairs, provenance }
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Source word → all of its gold targets, in file order.
    pub fn grouped(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut m: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (s, t) in &self.pairs {
            m.entry(s.as_str()).or_default().push(t.as_str());
        }
        m
    }

    /// Resolves pairs to row ids; errors on tokens absent from either side.
    pub fn to_ids(&self, src: &Vocabulary, tgt: &Vocabulary) -> Result<Vec<(usize, usize)>> {
        let mut missing = Vec::new();
        let mut ids = Vec::with_capacity(self.pairs.len());
        for (s, t) in &self.pairs {
            match (src.id(s), tgt.id(t)) {
                (Some(i), Some(j)) => ids.push((i, j)),
                (a, b) => {
                    if a.is_none() {
                        missing.push(s.clone());
                    }
                    if b.is_none() {
                        missing.push(t.clone());
                    }
                }
            }
        }
        if missing.is_empty() {
            Ok(ids)
        } else {
            Err(Error::MissingRows(missing))
        }
    }

    pub fn from_ids(
        ids: &[(usize, usize)],
        src: &Vocabulary,
        tgt: &Vocabulary,
        provenance: Provenance,
    ) -> Self {
        BilingualDictionary::new(
            ids.iter().map(|&(i, j)| (src.token(i).to_string(), tgt.token(j).to_string())),
            provenance,
        )
    }

    /// MUSE convention: one whitespace-separated "source target" pair per line.
    pub fn parse(text: &str, provenance: Provenance) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (None, ..) => continue,
                (Some(s), Some(t), None) => pairs.push((s.to_string(), t.to_string())),
                _ => {
                    return Err(Error::Parse {
                        what: "dictionary",
                        line: i + 1,
                        msg: "expected \"source target\"".into(),
                    })
                }
            }
        }
        Ok(BilingualDictionary::new(pairs, provenance))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (a, b) in &self.pairs {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn load(path: &Path, provenance: Provenance) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}
