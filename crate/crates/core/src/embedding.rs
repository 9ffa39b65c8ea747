//! Dense embedding matrices and the word2vec text format.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::scalar::{norm, Scalar};

/// `|V| × dim` row-major matrix with one row per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    vocab: Vocabulary,
    vectors: Vec<T>,
    dim: usize,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(vocab: Vocabulary, vectors: Vec<T>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch("embedding dimension must be positive".into()));
        }
        if vectors.len() != vocab.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} rows of dim {}",
                vectors.len(),
                vocab.len(),
                dim
            )));
        }
        if let Some(i) = vectors.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite value in row {:?}", vocab.token(i / dim))));
        }
        Ok(EmbeddingMatrix { vocab, vectors, dim })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.vocab.len()
    }

    pub fn vectors(&self) -> &[T] {
        &self.vectors
    }

    pub fn row(&self, id: usize) -> &[T] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_of(&self, token: &str) -> Option<&[T]> {
        self.vocab.id(token).map(|i| self.row(i))
    }

    /// Same vocabulary, new values.
    pub fn with_vectors(&self, vectors: Vec<T>) -> Result<Self> {
        EmbeddingMatrix::new(self.vocab.clone(), vectors, self.dim)
    }

    pub fn row_norms(&self) -> Vec<T> {
        (0..self.rows()).map(|i| norm(self.row(i))).collect()
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingMatrix<U> {
        EmbeddingMatrix {
            vocab: self.vocab.clone(),
            vectors: self.vectors.iter().map(|&x| U::of(x.f64())).collect(),
            dim: self.dim,
        }
    }

    /// word2vec text format: "count dim" header, then "token v1 ... vd".
    pub fn to_word2vec_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.rows(), self.dim);
        for i in 0..self.rows() {
            s.push_str(self.vocab.token(i));
            for x in self.row(i) {
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_word2vec(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(self.to_word2vec_string().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn parse_word2vec(text: &str) -> Result<Self> {
        Self::read_word2vec_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    pub fn read_word2vec(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_word2vec_lines(BufReader::new(f).lines().map(|l| l.map_err(|e| Error::io(path, e))))
    }

    fn read_word2vec_lines(mut lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse { what: "word2vec", line, msg };
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))??;
        let mut hp = header.split_whitespace();
        let (count, dim): (usize, usize) = match (hp.next(), hp.next(), hp.next()) {
            (Some(c), Some(d), None) => (
                c.parse().map_err(|_| bad(1, format!("bad count {c:?}")))?,
                d.parse().map_err(|_| bad(1, format!("bad dim {d:?}")))?,
            ),
            _ => return Err(bad(1, "expected \"count dim\"".into())),
        };
        let mut entries = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ').filter(|p| !p.is_empty());
            let tok = parts.next().ok_or_else(|| bad(i + 2, "empty line".into()))?;
            let before = vectors.len();
            for p in parts {
                let x: f64 = p.parse().map_err(|_| bad(i + 2, format!("bad value {p:?}")))?;
                vectors.push(T::of(x));
            }
            if vectors.len() - before != dim {
                return Err(bad(i + 2, format!("expected {dim} values, got {}", vectors.len() - before)));
            }
            entries.push((tok.to_string(), 0));
        }
        if entries.len() != count {
            return Err(bad(1, format!("header says {count} rows, found {}", entries.len())));
        }
        let vocab = Vocabulary::from_entries(&[], entries)?;
        EmbeddingMatrix::new(vocab, vectors, dim)
    }
}
