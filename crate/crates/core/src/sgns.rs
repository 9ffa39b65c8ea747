//! Skip-gram with negative sampling over (BPE-split) token sequences.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{vocab::count_tokens, Corpus, Vocabulary};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct SgnsConfig {
    pub dim: usize,
    /// Maximum context offset; the effective window is drawn from `1..=window`.
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Frequent-token subsampling threshold; 0 disables subsampling.
    pub subsample: f64,
    pub min_count: u64,
    pub power: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            subsample: 1e-4,
            min_count: 1,
            power: 0.75,
            seed: 1,
        }
    }
}

impl SgnsConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.window < 1 {
            errs.push("window must be >= 1".to_string());
        }
        if self.negatives < 1 {
            errs.push("negatives must be >= 1".to_string());
        }
        if self.dim < 2 {
            errs.push("dim must be >= 2".to_string());
        }
        if !(self.learning_rate > 0.0) {
            errs.push("learning_rate must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Normalized `freq^power` distribution.
pub fn build_unigram_table(freqs: &[u64], power: f64) -> Result<Vec<f64>> {
    if freqs.is_empty() || freqs.contains(&0) {
        return Err(Error::invalid("frequencies must be positive"));
    }
    let w: Vec<f64> = freqs.iter().map(|&f| (f as f64).powf(power)).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Gradients of one skip-gram sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient<T> {
    pub loss: f64,
    /// d loss / d center vector.
    pub center: Vec<T>,
    /// d loss / d output vector, one entry per (context, negatives...) in order.
    pub outputs: Vec<(usize, Vec<T>)>,
}

/// Input ("center") and output ("context") vectors.
#[derive(Debug, Clone)]
pub struct SgnsModel<T> {
    pub input: Vec<T>,
    pub output: Vec<T>,
    pub dim: usize,
    pub vocab_size: usize,
}

impl<T: Scalar> SgnsModel<T> {
    /// Input vectors uniform in `[-0.5/d, 0.5/d]`, output vectors zero.
    pub fn init(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let half = 0.5 / dim as f64;
        let input = (0..vocab_size * dim).map(|_| T::of(rng.random_range(-half..half))).collect();
        SgnsModel { input, output: vec![T::zero(); vocab_size * dim], dim, vocab_size }
    }

    fn in_row(&self, i: usize) -> &[T] {
        &self.input[i * self.dim..(i + 1) * self.dim]
    }

    fn out_row(&self, i: usize) -> &[T] {
        &self.output[i * self.dim..(i + 1) * self.dim]
    }

    /// Loss `-ln σ(u_ctx·v_c) - Σ ln σ(-u_neg·v_c)` and its exact gradient.
    pub fn gradients(&self, center: usize, context: usize, negatives: &[usize]) -> SampleGradient<T> {
        let v = self.in_row(center);
        let mut loss = 0.0;
        let mut g_center = vec![T::zero(); self.dim];
        let mut outputs = Vec::with_capacity(1 + negatives.len());
        for (k, &o) in std::iter::once(&context).chain(negatives).enumerate() {
            let u = self.out_row(o);
            let s = dot(u, v).f64();
            let positive = k == 0;
            // d loss / d s
            let coef = if positive {
                loss += neg_log_sigmoid(s);
                sigmoid(s) - 1.0
            } else {
                loss += neg_log_sigmoid(-s);
                sigmoid(s)
            };
            let c = T::of(coef);
            for (g, &x) in g_center.iter_mut().zip(u) {
                *g += c * x;
            }
            outputs.push((o, v.iter().map(|&x| c * x).collect()));
        }
        SampleGradient { loss, center: g_center, outputs }
    }

    /// One SGD update on a sample; returns the sample loss.
    pub fn step(&mut self, center: usize, context: usize, negatives: &[usize], lr: T) -> f64 {
        let g = self.gradients(center, context, negatives);
        let d = self.dim;
        for (o, go) in &g.outputs {
            for (x, &gx) in self.output[o * d..(o + 1) * d].iter_mut().zip(go) {
                *x -= lr * gx;
            }
        }
        for (x, &gx) in self.input[center * d..(center + 1) * d].iter_mut().zip(&g.center) {
            *x -= lr * gx;
        }
        g.loss
    }
}

/// Per-epoch mean sample loss, for monitoring.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgnsTrace {
    pub epoch_loss: Vec<f64>,
}

/// Vocabulary used by [`train_sgns`]: frequency-sorted, no specials.
pub fn sgns_vocab(corpus: &Corpus, min_count: u64) -> Result<Vocabulary> {
    Vocabulary::from_entries(&[], count_tokens(corpus, min_count, &[]))
}

pub fn train_sgns<T: Scalar>(corpus: &Corpus, config: &SgnsConfig) -> Result<EmbeddingMatrix<T>> {
    train_sgns_traced(corpus, config).map(|(m, _)| m)
}

/// Trains single-threaded and deterministically given `config.seed`.
pub fn train_sgns_traced<T: Scalar>(
    corpus: &Corpus,
    config: &SgnsConfig,
) -> Result<(EmbeddingMatrix<T>, SgnsTrace)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = sgns_vocab(corpus, config.min_count)?;
    if vocab.len() < config.negatives + 1 {
        return Err(Error::VocabularyTooSmall { size: vocab.len(), needed: config.negatives + 1 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = SgnsModel::<T>::init(vocab.len(), config.dim, &mut rng);
    let probs = build_unigram_table(vocab.counts(), config.power)?;
    let noise = WeightedIndex::new(&probs).map_err(|e| Error::invalid(e.to_string()))?;

    let sentences: Vec<Vec<usize>> = corpus
        .sentences
        .iter()
        .map(|s| s.iter().filter_map(|t| vocab.id(t)).collect())
        .collect();
    let total: u64 = vocab.counts().iter().sum();
    let keep_prob: Vec<f64> = vocab
        .counts()
        .iter()
        .map(|&c| {
            if config.subsample <= 0.0 {
                1.0
            } else {
                let f = c as f64 / (config.subsample * total as f64);
                ((f.sqrt() + 1.0) / f).min(1.0)
            }
        })
        .collect();

    let planned = (total as f64 * config.epochs as f64).max(1.0);
    let min_lr = config.learning_rate * 1e-4;
    let mut processed = 0u64;
    let mut trace = SgnsTrace::default();
    let mut negs = vec![0usize; config.negatives];
    let mut kept = Vec::new();

    for _ in 0..config.epochs {
        let (mut loss_sum, mut samples) = (0.0, 0u64);
        for sent in &sentences {
            processed += sent.len() as u64;
            kept.clear();
            kept.extend(sent.iter().copied().filter(|&w| rng.random::<f64>() < keep_prob[w]));
            let lr = (config.learning_rate * (1.0 - processed as f64 / planned)).max(min_lr);
            let lr = T::of(lr);
            for (pos, &center) in kept.iter().enumerate() {
                let b = rng.random_range(1..=config.window);
                let lo = pos.saturating_sub(b);
                let hi = (pos + b).min(kept.len() - 1);
                for cpos in lo..=hi {
                    if cpos == pos {
                        continue;
                    }
                    let context = kept[cpos];
                    for n in negs.iter_mut() {
                        let mut draw = noise.sample(&mut rng);
                        for _ in 0..8 {
                            if draw != context {
                                break;
                            }
                            draw = noise.sample(&mut rng);
                        }
                        *n = draw;
                    }
                    loss_sum += model.step(center, context, &negs, lr);
                    samples += 1;
                }
            }
        }
        trace.epoch_loss.push(if samples == 0 { 0.0 } else { loss_sum / samples as f64 });
    }

    let emb = EmbeddingMatrix::new(vocab, model.input, config.dim)?;
    Ok((emb, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::norm;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    /// Sentences alternate between two clusters that never mix.
    fn two_cluster_corpus() -> Corpus {
        let mut lines = Vec::new();
        let a = ["a1", "a2", "a3"];
        let b = ["b1", "b2", "b3"];
        for i in 0..400 {
            let cl = if i % 2 == 0 { &a } else { &b };
            let s: Vec<&str> = (0..8).map(|j| cl[(i * 7 + j * 5) % 3]).collect();
            lines.push(s.join(" "));
        }
        Corpus::from_lines("xx", lines.iter().map(String::as_str))
    }

    fn cfg() -> SgnsConfig {
        SgnsConfig { dim: 16, window: 3, negatives: 2, epochs: 5, subsample: 0.0, seed: 7, ..Default::default() }
    }

    #[test]
    fn unigram_table_values() {
        assert_eq!(build_unigram_table(&[1, 1], 0.75).unwrap(), vec![0.5, 0.5]);
        let p = build_unigram_table(&[4, 1], 1.0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        let u = build_unigram_table(&[9, 2, 5], 0.0).unwrap();
        assert!(u.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(build_unigram_table(&[1, 0], 1.0).is_err());
    }

    #[test]
    fn zero_center_loss_is_ln2_per_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SgnsModel::<f64>::init(6, 4, &mut rng);
        m.output.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        m.input[..4].iter_mut().for_each(|x| *x = 0.0);
        let g = m.gradients(0, 1, &[2, 3, 4]);
        assert!((g.loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_loss_goes_to_zero() {
        let mut m = SgnsModel::<f64> { input: vec![0.0; 6], output: vec![0.0; 6], dim: 2, vocab_size: 3 };
        m.input[..2].copy_from_slice(&[50.0, 0.0]);
        m.output[2..4].copy_from_slice(&[50.0, 0.0]);
        m.output[4..6].copy_from_slice(&[-50.0, 0.0]);
        assert!(m.gradients(0, 1, &[2]).loss < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = SgnsModel::<f64>::init(8, 5, &mut rng);
        m.input.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        m.output.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        // Repeated negative exercises gradient accumulation.
        let (c, ctx, negs) = (2, 5, [1usize, 7, 1]);
        // Independent oracle: the objective written out directly.
        let objective = |m: &SgnsModel<f64>| -> f64 {
            let v = &m.input[c * 5..c * 5 + 5];
            let s = |o: usize| dot(&m.output[o * 5..o * 5 + 5], v);
            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
            -sig(s(ctx)).ln() - negs.iter().map(|&n| sig(-s(n)).ln()).sum::<f64>()
        };
        let g = m.gradients(c, ctx, &negs);
        assert!((g.loss - objective(&m)).abs() < 1e-12);
        let h = 1e-5;
        for j in 0..5 {
            let mut p = m.clone();
            p.input[c * 5 + j] += h;
            let mut q = m.clone();
            q.input[c * 5 + j] -= h;
            let fd = (objective(&p) - objective(&q)) / (2.0 * h);
            let rel = (fd - g.center[j]).abs() / fd.abs().max(g.center[j].abs()).max(1e-8);
            assert!(rel < 1e-4, "center[{j}]: fd {fd} vs {}", g.center[j]);
        }
        // Output-side gradients, summed over repeated ids.
        for o in [ctx, 1, 7] {
            for j in 0..5 {
                let analytic: f64 = g.outputs.iter().filter(|(id, _)| *id == o).map(|(_, v)| v[j]).sum();
                let mut p = m.clone();
                p.output[o * 5 + j] += h;
                let mut q = m.clone();
                q.output[o * 5 + j] -= h;
                let fd = (objective(&p) - objective(&q)) / (2.0 * h);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-4, "output {o}[{j}]: fd {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn clusters_separate() {
        let (emb, trace) = train_sgns_traced::<f64>(&two_cluster_corpus(), &cfg()).unwrap();
        let r = |t: &str| emb.row_of(t).unwrap().to_vec();
        assert!(cos(&r("a1"), &r("a2")) > cos(&r("a1"), &r("b1")));
        assert!(cos(&r("b2"), &r("b3")) > cos(&r("b2"), &r("a3")));
        assert!(emb.vectors().iter().all(|x| x.is_finite()));
        let l = &trace.epoch_loss;
        assert!(l[1] <= l[0] && l[2] <= l[1], "epoch losses {l:?}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let c = two_cluster_corpus();
        let conf = SgnsConfig { epochs: 0, ..cfg() };
        let emb = train_sgns::<f64>(&c, &conf).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(conf.seed);
        let init = SgnsModel::<f64>::init(emb.rows(), conf.dim, &mut rng);
        assert_eq!(emb.vectors(), init.input.as_slice());
    }

    #[test]
    fn deterministic_given_seed() {
        let c = two_cluster_corpus();
        let a = train_sgns::<f32>(&c, &cfg()).unwrap();
        let b = train_sgns::<f32>(&c, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_vocabulary_rejected() {
        let c = Corpus::from_lines("xx", ["a b a b"]);
        let err = train_sgns::<f64>(&c, &SgnsConfig { negatives: 5, ..cfg() }).unwrap_err();
        assert!(err.to_string().contains("vocabulary too small for negative sampling"));
        assert!(matches!(train_sgns::<f64>(&Corpus::default(), &cfg()), Err(Error::EmptyCorpus)));
    }
}
