//! Bilingual lexicon induction precision, corpus BLEU and chrF.

use std::collections::HashMap;
use std::fmt;

use crate::corpus::{tokenize, BpeModel, Vocabulary};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::scalar::{matmul_bt, norm, Scalar};
use crate::vecmap::{knn_mean_similarity, BilingualDictionary};

/// Unweighted mean of the word's subword vectors, or `None` if any subword
/// is missing from `emb`. Without a BPE model the word is looked up whole.
pub fn word_vector<T: Scalar>(word: &str, bpe: Option<&BpeModel>, emb: &EmbeddingMatrix<T>) -> Option<Vec<T>> {
    let pieces = match bpe {
        Some(b) => b.apply(&[word.to_string()]),
        None => vec![word.to_string()],
    };
    if pieces.is_empty() {
        return None;
    }
    let mut acc = vec![T::zero(); emb.dim()];
    for p in &pieces {
        let row = emb.row_of(p)?;
        acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x);
    }
    let n = T::of(pieces.len() as f64);
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

/// Word-level matrix over `words` built with [`word_vector`]; returns the
/// words skipped as out-of-vocabulary alongside it.
pub fn word_matrix<T: Scalar>(
    words: &[String],
    bpe: Option<&BpeModel>,
    emb: &EmbeddingMatrix<T>,
) -> Result<(EmbeddingMatrix<T>, Vec<String>)> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    let mut oov = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for w in words {
        if !seen.insert(w.as_str()) {
            continue;
        }
        match word_vector(w, bpe, emb) {
            Some(v) => {
                entries.push((w.clone(), 0));
                data.extend(v);
            }
            None => oov.push(w.clone()),
        }
    }
    let vocab = Vocabulary::from_entries(&[], entries)?;
    Ok((EmbeddingMatrix::new(vocab, data, emb.dim())?, oov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BliMethod {
    Nn,
    Csls,
}

impl fmt::Display for BliMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BliMethod::Nn => "NN",
            BliMethod::Csls => "CSLS",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BliReport {
    pub method: BliMethod,
    pub k: usize,
    pub precision: f64,
    pub evaluated: usize,
    pub skipped_oov: usize,
}

impl BliReport {
    pub fn tsv(&self) -> String {
        format!("bli\t{}\t{}\t{:.6}\t{}\t{}", self.method, self.k, self.precision, self.evaluated, self.skipped_oov)
    }
}

impl fmt::Display for BliReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "P@{} ({}): {:.2}% over {} source words ({} skipped as OOV)",
            self.k,
            self.method,
            100.0 * self.precision,
            self.evaluated,
            self.skipped_oov
        )
    }
}

fn unit(v: &[impl Scalar], d: usize) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|x| x.f64()).collect();
    for row in out.chunks_mut(d) {
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

/// Precision@k of the gold dictionary. Source words missing from `src` and
/// source words with no gold target in `tgt` are skipped and counted. Every
/// target row is a candidate; ties rank the lower id first.
pub fn bli_precision<T: Scalar>(
    src: &EmbeddingMatrix<T>,
    tgt: &EmbeddingMatrix<T>,
    gold: &BilingualDictionary,
    k: usize,
    method: BliMethod,
    csls_k: usize,
) -> Result<BliReport> {
    if k == 0 || csls_k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch(format!("source dim {} vs target dim {}", src.dim(), tgt.dim())));
    }
    let d = src.dim();
    let mut queries: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut skipped = 0;
    for (s, ts) in gold.grouped() {
        let golds: Vec<usize> = ts.iter().filter_map(|t| tgt.vocab().id(t)).collect();
        match src.vocab().id(s) {
            Some(i) if !golds.is_empty() => queries.push((i, golds)),
            _ => skipped += 1,
        }
    }
    if queries.is_empty() {
        return Err(Error::NoEvaluablePairs);
    }
    let xs = unit(src.vectors(), d);
    let ys = unit(tgt.vectors(), d);
    let nt = tgt.rows();
    let (r_src, r_tgt) = match method {
        BliMethod::Nn => (vec![0.0; src.rows()], vec![0.0; nt]),
        BliMethod::Csls => (knn_mean_similarity(&xs, &ys, d, csls_k), knn_mean_similarity(&ys, &xs, d, csls_k)),
    };
    let q: Vec<f64> = queries.iter().flat_map(|(i, _)| xs[i * d..(i + 1) * d].iter().copied()).collect();
    let mut sims = vec![0.0; queries.len() * nt];
    matmul_bt(queries.len(), d, nt, &q, &ys, &mut sims);
    let mut hits = 0;
    let mut order: Vec<usize> = (0..nt).collect();
    for (qi, (i, golds)) in queries.iter().enumerate() {
        let score = |j: usize| match method {
            BliMethod::Nn => sims[qi * nt + j],
            BliMethod::Csls => 2.0 * sims[qi * nt + j] - r_src[*i] - r_tgt[j],
        };
        let cmp = |a: &usize, b: &usize| score(*b).total_cmp(&score(*a)).then(a.cmp(b));
        let top = k.min(nt);
        if top < nt {
            order.select_nth_unstable_by(top - 1, cmp);
        }
        if order[..top].iter().any(|j| golds.contains(j)) {
            hits += 1;
        }
    }
    Ok(BliReport { method, k, precision: hits as f64 / queries.len() as f64, evaluated: queries.len(), skipped_oov: skipped })
}

pub const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Corpus BLEU in [0, 100].
    pub bleu: f64,
    /// Unigram precision is raw; higher orders with no match are smoothed.
    pub precisions: [f64; BLEU_ORDER],
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// `BP · exp(mean log p_n)`, scaled to [0, 100].
    pub fn recompute(&self) -> f64 {
        if self.precisions.iter().any(|&p| p <= 0.0) {
            return 0.0;
        }
        let mean_log = self.precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
        100.0 * self.brevity_penalty * mean_log.exp()
    }

    pub fn tsv(&self) -> String {
        format!(
            "bleu\t{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU = {:.2} {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3} hyp_len = {} ref_len = {})",
            self.bleu,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_lengths(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::LengthMismatch { hyp: hyps.len(), refs: refs.len() });
    }
    Ok(())
}

/// Corpus BLEU over single references with clipped n-gram counts and
/// exponential smoothing: the j-th order (n ≥ 2) with zero matches gets
/// precision `1 / (2^j · total)`. Text is tokenized on whitespace and
/// punctuation.
pub fn bleu(hyps: &[String], refs: &[String]) -> Result<BleuReport> {
    check_lengths(hyps, refs)?;
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenize(h), tokenize(r));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = [0.0; BLEU_ORDER];
    let mut smooth = 1.0;
    for n in 0..BLEU_ORDER {
        if totals[n] == 0 {
            break;
        }
        precisions[n] = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if n == 0 {
            0.0
        } else {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut report = BleuReport { bleu: 0.0, precisions, matches, totals, brevity_penalty, hyp_len, ref_len };
    report.bleu = report.recompute();
    Ok(report)
}

/// Raw clipped unigram precision as a percentage.
pub fn unigram_precision(hyps: &[String], refs: &[String]) -> Result<f64> {
    Ok(bleu(hyps, refs)?.precisions[0] * 100.0)
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus chrF in [0, 100]. Whitespace is removed before extracting
/// character n-grams for n = 1..=max_n; precision and recall are averaged
/// over the orders present in both hypothesis and reference, then combined
/// as F_β.
pub fn chrf(hyps: &[String], refs: &[String], max_n: usize, beta: f64) -> Result<f64> {
    check_lengths(hyps, refs)?;
    if max_n == 0 || !(beta > 0.0) {
        return Err(Error::invalid("chrF needs max_n ≥ 1 and beta > 0"));
    }
    let mut stats = vec![[0usize; 3]; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=max_n {
            let hc = char_ngrams(&h, n);
            let rc = char_ngrams(&r, n);
            let s = &mut stats[n - 1];
            s[0] += hc.values().sum::<usize>();
            s[1] += rc.values().sum::<usize>();
            s[2] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let (mut p, mut r, mut orders) = (0.0, 0.0, 0usize);
    for [nh, nr, nm] in stats {
        if nh > 0 && nr > 0 {
            p += nm as f64 / nh as f64;
            r += nm as f64 / nr as f64;
            orders += 1;
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    p /= orders as f64;
    r /= orders as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    Ok(100.0 * (1.0 + b2) * p * r / (b2 * p + r))
}
