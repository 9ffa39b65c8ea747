//! Unsupervised orthogonal mapping of two embedding spaces.
//!
//! Mapping starts from a dictionary of tokens spelled identically in both
//! vocabularies, then alternates an orthogonal Procrustes solve with CSLS
//! dictionary induction. Induction is stochastic: each induced pair survives
//! with a keep-probability that starts low and doubles whenever the objective
//! (mean cosine of the induced pairs) stops improving. Mapping ends when the
//! objective stalls at keep-probability 1.

mod dictionary;

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use dictionary::{BilingualDictionary, Provenance};

use crate::corpus::Vocabulary;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::scalar::{dot, matmul, matmul_bt, norm, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    pub csls_k: usize,
    /// Only the first `vocab_cutoff` rows (most frequent) take part in induction.
    pub vocab_cutoff: usize,
    pub keep_prob_init: f64,
    pub keep_prob_growth: f64,
    /// Non-improving iterations tolerated before the keep-probability grows.
    pub stall_patience: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            csls_k: 10,
            vocab_cutoff: 20_000,
            keep_prob_init: 0.1,
            keep_prob_growth: 2.0,
            stall_patience: 3,
            tolerance: 1e-6,
            max_iterations: 200,
            seed: 1,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.csls_k < 1 {
            errs.push("csls_k must be >= 1".to_string());
        }
        if !(self.tolerance > 0.0) {
            errs.push("tolerance must be > 0".to_string());
        }
        if !(self.keep_prob_init > 0.0 && self.keep_prob_init <= 1.0) {
            errs.push("keep_prob_init must be in (0, 1]".to_string());
        }
        if !(self.keep_prob_growth > 1.0) {
            errs.push("keep_prob_growth must be > 1".to_string());
        }
        if self.vocab_cutoff < 1 || self.max_iterations < 1 {
            errs.push("vocab_cutoff and max_iterations must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapStatus {
    Converged,
    MaxIterationsReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dictionary_size: usize,
    pub objective: f64,
    pub keep_prob: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct MappingSolution<T> {
    /// Applied to (normalized) source rows: `x ↦ x · w_src`.
    pub w_src: Vec<T>,
    /// Always the identity for the orthogonal variant.
    pub w_tgt: Vec<T>,
    pub dim: usize,
    pub final_dictionary: BilingualDictionary,
    pub objective_trace: Vec<f64>,
    pub history: Vec<IterationRecord>,
    pub status: MapStatus,
}

impl<T: Scalar> MappingSolution<T> {
    /// Tab-separated log: iteration, dictionary size, mean cosine, keep-probability.
    pub fn report(&self) -> String {
        let mut s = String::from("iteration\tdict_size\tmean_cos\tkeep_prob\taccepted\n");
        for r in &self.history {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.4}\t{}",
                r.iteration, r.dictionary_size, r.objective, r.keep_prob, r.accepted
            );
        }
        let _ = writeln!(s, "status\t{:?}", self.status);
        s
    }

    pub fn map_source(&self, e: &EmbeddingMatrix<T>) -> Result<EmbeddingMatrix<T>> {
        apply_transform(&normalize(e)?, &self.w_src)
    }

    pub fn map_target(&self, e: &EmbeddingMatrix<T>) -> Result<EmbeddingMatrix<T>> {
        apply_transform(&normalize(e)?, &self.w_tgt)
    }
}

/// Length-normalize rows, mean-center columns, length-normalize again.
pub fn normalize<T: Scalar>(e: &EmbeddingMatrix<T>) -> Result<EmbeddingMatrix<T>> {
    let d = e.dim();
    let mut v = e.vectors().to_vec();
    unit_rows(&mut v, d, e.vocab())?;
    if e.rows() < 2 {
        return Err(Error::DegenerateMatrix);
    }
    let n = T::of(e.rows() as f64);
    let mut mean = vec![T::zero(); d];
    for row in v.chunks(d) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for row in v.chunks_mut(d) {
        for (x, &m) in row.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    unit_rows(&mut v, d, e.vocab())?;
    e.with_vectors(v)
}

fn unit_rows<T: Scalar>(v: &mut [T], d: usize, vocab: &Vocabulary) -> Result<()> {
    for (i, row) in v.chunks_mut(d).enumerate() {
        let n = norm(row);
        if n <= T::epsilon() * T::of(8.0) {
            return Err(Error::ZeroRow(vocab.token(i).to_string()));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(())
}

fn unit_rows_lossy<T: Scalar>(v: &[T], d: usize) -> Vec<T> {
    let mut out = v.to_vec();
    for row in out.chunks_mut(d) {
        let n = norm(row);
        if n > T::zero() {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

/// `e · w` for a `d × d` row-major transform.
pub fn apply_transform<T: Scalar>(e: &EmbeddingMatrix<T>, w: &[T]) -> Result<EmbeddingMatrix<T>> {
    let d = e.dim();
    if w.len() != d * d {
        return Err(Error::DimensionMismatch(format!("transform has {} values, dim is {d}", w.len())));
    }
    let mut out = vec![T::zero(); e.rows() * d];
    matmul(e.rows(), d, d, e.vectors(), w, &mut out);
    e.with_vectors(out)
}

/// Pairs of tokens spelled identically on both sides, special tokens excluded,
/// in source-id order.
pub fn seed_identical(src: &Vocabulary, tgt: &Vocabulary) -> Result<BilingualDictionary> {
    let pairs: Vec<(String, String)> = src
        .regular_ids()
        .filter_map(|i| {
            let t = src.token(i);
            tgt.id(t).filter(|&j| !tgt.is_special(j)).map(|_| (t.to_string(), t.to_string()))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoIdenticalTokens);
    }
    Ok(BilingualDictionary::new(pairs, Provenance::Seed))
}

/// Orthogonal `W = U Vᵀ` from `svd(X_dᵀ Z_d)` over dictionary rows.
pub fn procrustes<T: Scalar>(
    x: &EmbeddingMatrix<T>,
    z: &EmbeddingMatrix<T>,
    dict: &BilingualDictionary,
) -> Result<Vec<T>> {
    if x.dim() != z.dim() {
        return Err(Error::DimensionMismatch(format!("source dim {} vs target dim {}", x.dim(), z.dim())));
    }
    let ids = dict.to_ids(x.vocab(), z.vocab())?;
    procrustes_ids(x.vectors(), z.vectors(), x.dim(), &ids)
}

pub(crate) fn procrustes_ids<T: Scalar>(x: &[T], z: &[T], d: usize, ids: &[(usize, usize)]) -> Result<Vec<T>> {
    if ids.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    for &(i, j) in ids {
        let xr = &x[i * d..(i + 1) * d];
        let zr = &z[j * d..(j + 1) * d];
        for (a, &xa) in xr.iter().enumerate() {
            let xa = xa.f64();
            for (b, &zb) in zr.iter().enumerate() {
                m[(a, b)] += xa * zb.f64();
            }
        }
    }
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::invalid("SVD did not converge")),
    };
    let w = u * vt;
    let mut out = Vec::with_capacity(d * d);
    for r in 0..d {
        for c in 0..d {
            out.push(T::of(w[(r, c)]));
        }
    }
    Ok(out)
}

/// Mean of the top-`k` entries (k clamped to the row length).
fn top_k_mean<T: Scalar>(row: &mut [T], k: usize) -> f64 {
    let k = k.min(row.len());
    if k == 0 {
        return 0.0;
    }
    if k < row.len() {
        row.select_nth_unstable_by(k - 1, |a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    }
    row[..k].iter().map(|x| x.f64()).sum::<f64>() / k as f64
}

const CHUNK: usize = 1024;

/// For each row of `a`, the mean cosine to its `k` nearest rows of `b`.
/// Both inputs must have unit rows.
pub(crate) fn knn_mean_similarity<T: Scalar>(a: &[T], b: &[T], d: usize, k: usize) -> Vec<f64> {
    let na = a.len() / d;
    let nb = b.len() / d;
    let mut out = Vec::with_capacity(na);
    let mut sims = vec![T::zero(); CHUNK.min(na.max(1)) * nb];
    for start in (0..na).step_by(CHUNK) {
        let rows = CHUNK.min(na - start);
        let s = &mut sims[..rows * nb];
        matmul_bt(rows, d, nb, &a[start * d..(start + rows) * d], b, s);
        for r in 0..rows {
            out.push(top_k_mean(&mut s[r * nb..(r + 1) * nb], k));
        }
    }
    out
}

/// CSLS(x, y) = 2 cos(x, y) − r_T(x) − r_S(y), where r_T(x) is the mean
/// cosine of x to its k nearest target rows and r_S(y) the mean cosine of y
/// to its k nearest (mapped) source rows.
pub fn csls_score<T: Scalar>(x: &[T], y: &[T], x_mapped: &[T], y_all: &[T], dim: usize, k: usize) -> f64 {
    let cos = |a: &[T], b: &[T]| {
        let (na, nb) = (norm(a).f64(), norm(b).f64());
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot(a, b).f64() / (na * nb)
        }
    };
    let r = |v: &[T], pool: &[T]| {
        let mut sims: Vec<f64> = pool.chunks(dim).map(|p| cos(v, p)).collect();
        top_k_mean(&mut sims, k)
    };
    2.0 * cos(x, y) - r(x, y_all) - r(y, x_mapped)
}

/// Precomputed CSLS neighborhood terms for two unit-row matrices.
pub(crate) struct CslsContext<'a, T> {
    pub src: &'a [T],
    pub tgt: &'a [T],
    pub dim: usize,
    pub r_src: Vec<f64>,
    pub r_tgt: Vec<f64>,
}

impl<'a, T: Scalar> CslsContext<'a, T> {
    pub fn new(src: &'a [T], tgt: &'a [T], dim: usize, k: usize) -> Self {
        CslsContext {
            src,
            tgt,
            dim,
            r_src: knn_mean_similarity(src, tgt, dim, k),
            r_tgt: knn_mean_similarity(tgt, src, dim, k),
        }
    }

    /// Best CSLS target for every source row and best source for every
    /// target row, with the cosine of each chosen pair. Ties go to the lower id.
    pub fn best_matches(&self) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
        let d = self.dim;
        let ns = self.src.len() / d;
        let nt = self.tgt.len() / d;
        let mut fwd = Vec::with_capacity(ns);
        let mut bwd = vec![(usize::MAX, f64::NEG_INFINITY, 0.0f64); nt];
        let mut sims = vec![T::zero(); CHUNK.min(ns.max(1)) * nt];
        for start in (0..ns).step_by(CHUNK) {
            let rows = CHUNK.min(ns - start);
            let s = &mut sims[..rows * nt];
            matmul_bt(rows, d, nt, &self.src[start * d..(start + rows) * d], self.tgt, s);
            for r in 0..rows {
                let i = start + r;
                let mut best = (usize::MAX, f64::NEG_INFINITY, 0.0);
                for (j, &c) in s[r * nt..(r + 1) * nt].iter().enumerate() {
                    let c = c.f64();
                    let score = 2.0 * c - self.r_src[i] - self.r_tgt[j];
                    if score > best.1 {
                        best = (j, score, c);
                    }
                    if score > bwd[j].1 {
                        bwd[j] = (i, score, c);
                    }
                }
                fwd.push((best.0, best.2));
            }
        }
        (fwd, bwd.into_iter().map(|(i, _, c)| (i, c)).collect())
    }
}

/// Union of forward and backward CSLS matches plus their mean cosine.
fn induce_candidates<T: Scalar>(xw: &[T], z: &[T], d: usize, cutoff_src: usize, cutoff_tgt: usize, k: usize) -> (Vec<(usize, usize)>, f64) {
    let ctx = CslsContext::new(&xw[..cutoff_src * d], &z[..cutoff_tgt * d], d, k);
    let (fwd, bwd) = ctx.best_matches();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(fwd.len() + bwd.len());
    pairs.extend(fwd.iter().enumerate().map(|(i, &(j, c))| (i, j, c)));
    pairs.extend(bwd.iter().enumerate().map(|(j, &(i, c))| (i, j, c)));
    pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    pairs.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let mean = if pairs.is_empty() { 0.0 } else { pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64 };
    (pairs.into_iter().map(|(i, j, _)| (i, j)).collect(), mean)
}

fn keep_stochastic(pairs: &[(usize, usize)], keep_prob: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    if keep_prob >= 1.0 {
        return pairs.to_vec();
    }
    pairs.iter().copied().filter(|_| rng.random::<f64>() < keep_prob).collect()
}

/// One induction step over normalized, already-mapped matrices.
pub fn induce_dictionary<T: Scalar>(
    x_mapped: &EmbeddingMatrix<T>,
    z_mapped: &EmbeddingMatrix<T>,
    config: &MapConfig,
    keep_prob: f64,
    rng: &mut impl Rng,
) -> Result<BilingualDictionary> {
    if x_mapped.dim() != z_mapped.dim() {
        return Err(Error::DimensionMismatch("induction inputs differ in dimension".into()));
    }
    let d = x_mapped.dim();
    let xs = unit_rows_lossy(x_mapped.vectors(), d);
    let zs = unit_rows_lossy(z_mapped.vectors(), d);
    let ns = config.vocab_cutoff.min(x_mapped.rows());
    let nt = config.vocab_cutoff.min(z_mapped.rows());
    let (cands, _) = induce_candidates(&xs, &zs, d, ns, nt, config.csls_k);
    let kept = keep_stochastic(&cands, keep_prob, rng);
    Ok(BilingualDictionary::from_ids(&kept, x_mapped.vocab(), z_mapped.vocab(), Provenance::Induced))
}

/// Self-learning loop: normalize both spaces, then alternate Procrustes and
/// stochastic CSLS induction. Returns the best-objective mapping.
pub fn self_learn<T: Scalar>(
    src: &EmbeddingMatrix<T>,
    tgt: &EmbeddingMatrix<T>,
    seed: &BilingualDictionary,
    config: &MapConfig,
) -> Result<MappingSolution<T>> {
    config.validate()?;
    if src.dim() != tgt.dim() {
        return Err(Error::DimensionMismatch(format!("source dim {} vs target dim {}", src.dim(), tgt.dim())));
    }
    if seed.is_empty() {
        return Err(Error::EmptyDictionary);
    }
    let d = src.dim();
    let x = normalize(src)?;
    let z = normalize(tgt)?;
    let mut dict = seed.to_ids(x.vocab(), z.vocab())?;
    let ns = config.vocab_cutoff.min(x.rows());
    let nt = config.vocab_cutoff.min(z.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut keep = config.keep_prob_init.min(1.0);
    let mut best: Option<(Vec<T>, Vec<(usize, usize)>, f64)> = None;
    let mut since_improvement = 0usize;
    let mut trace = Vec::new();
    let mut history = Vec::new();
    let mut status = MapStatus::MaxIterationsReached;
    let mut xw = vec![T::zero(); x.rows() * d];

    for it in 1..=config.max_iterations {
        let w = procrustes_ids(x.vectors(), z.vectors(), d, &dict)?;
        matmul(x.rows(), d, d, x.vectors(), &w, &mut xw);
        let (cands, objective) = induce_candidates(&xw, z.vectors(), d, ns, nt, config.csls_k);
        let best_obj = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.2);
        let accepted = objective - best_obj >= config.tolerance;
        trace.push(objective);
        history.push(IterationRecord { iteration: it, dictionary_size: dict.len(), objective, keep_prob: keep, accepted });
        if accepted {
            best = Some((w, cands.clone(), objective));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if keep >= 1.0 {
                status = MapStatus::Converged;
                break;
            }
            if since_improvement >= config.stall_patience {
                keep = (keep * config.keep_prob_growth).min(1.0);
                since_improvement = 0;
            }
        }
        let next = keep_stochastic(&cands, keep, &mut rng);
        if !next.is_empty() {
            dict = next;
        }
    }

    let (w, ids, _) = best.expect("at least one iteration ran");
    let mut eye = vec![T::zero(); d * d];
    (0..d).for_each(|i| eye[i * d + i] = T::one());
    Ok(MappingSolution {
        w_src: w,
        w_tgt: eye,
        dim: d,
        final_dictionary: BilingualDictionary::from_ids(&ids, x.vocab(), z.vocab(), Provenance::Induced),
        objective_trace: trace,
        history,
        status,
    })
}

/// Maps `new` into the space of `model` (held fixed), seeding with the
/// identically spelled tokens of the two vocabularies.
pub fn align_to_model_space<T: Scalar>(
    new: &EmbeddingMatrix<T>,
    model: &EmbeddingMatrix<T>,
    config: &MapConfig,
) -> Result<EmbeddingMatrix<T>> {
    if new.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!("new dim {} vs model dim {}", new.dim(), model.dim())));
    }
    let seed = seed_identical(new.vocab(), model.vocab())?;
    let sol = self_learn(new, model, &seed, config)?;
    sol.map_source(new)
}

/// Fills every row of `joint` from the mapped side(s) that contain it.
/// Tokens on both sides get the element-wise mean; tokens on neither side
/// (the specials) get N(0, 1/d) rows from `seed`.
pub fn concat_mapped<T: Scalar>(
    src_mapped: &EmbeddingMatrix<T>,
    tgt_mapped: &EmbeddingMatrix<T>,
    joint: &Vocabulary,
    seed: u64,
) -> Result<EmbeddingMatrix<T>> {
    let d = src_mapped.dim();
    if tgt_mapped.dim() != d {
        return Err(Error::DimensionMismatch(format!("source dim {d} vs target dim {}", tgt_mapped.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
    let half = T::of(0.5);
    let mut out = Vec::with_capacity(joint.len() * d);
    for id in 0..joint.len() {
        let tok = joint.token(id);
        match (src_mapped.row_of(tok), tgt_mapped.row_of(tok)) {
            (Some(a), Some(b)) => out.extend(a.iter().zip(b).map(|(&u, &v)| (u + v) * half)),
            (Some(a), None) => out.extend_from_slice(a),
            (None, Some(b)) => out.extend_from_slice(b),
            (None, None) => out.extend((0..d).map(|_| T::of(normal.sample(&mut rng)))),
        }
    }
    EmbeddingMatrix::new(joint.clone(), out, d)
}

#[cfg(test)]
mod tests;
