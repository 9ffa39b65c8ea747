//! Bilingual masked-LM training with pluggable embedding initialization and
//! vocabulary extension.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::corpus::{Corpus, Vocabulary};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::neural::{
    add_encoder, encoder_forward, output_logits, Adam, AdamConfig, Checkpoint, PaddedBatch, ParamStore, Tape,
    TransformerConfig, TransformerLayout,
};
use crate::scalar::Scalar;

/// How the token embedding table is initialized.
#[derive(Debug, Clone)]
pub enum InitMode<T> {
    Random,
    /// Copy rows from the matrix, keep training them.
    AlignedFinetuned(EmbeddingMatrix<T>),
    /// Copy rows from the matrix and never update the table.
    AlignedFrozen(EmbeddingMatrix<T>),
}

impl<T> InitMode<T> {
    pub fn name(&self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::AlignedFinetuned(_) => "aligned_finetuned",
            InitMode::AlignedFrozen(_) => "aligned_frozen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingPolicy {
    pub mask_rate: f64,
    pub mask_share: f64,
    pub random_share: f64,
    pub keep_share: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy { mask_rate: 0.15, mask_share: 0.8, random_share: 0.1, keep_share: 0.1 }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            errs.push(format!("mask_rate {} must be in (0, 1]", self.mask_rate));
        }
        let shares = [self.mask_share, self.random_share, self.keep_share];
        if shares.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            errs.push("mask shares must be in [0, 1]".to_string());
        }
        if (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errs.push(format!("mask shares sum to {}, not 1", shares.iter().sum::<f64>()));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Per-language sampling weights for training batches.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSchedule {
    pub weights: Vec<f64>,
}

impl Default for StreamSchedule {
    fn default() -> Self {
        StreamSchedule { weights: vec![1.0, 1.0] }
    }
}

impl StreamSchedule {
    pub fn validate(&self, n_langs: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.weights.len() != n_langs {
            errs.push(format!("{} schedule weights for {n_langs} languages", self.weights.len()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            errs.push("schedule weights must be finite and non-negative".to_string());
        }
        if !(self.weights.iter().sum::<f64>() > 0.0) {
            errs.push("at least one schedule weight must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Encoder-only transformer with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmModel<T> {
    pub config: TransformerConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub layout: TransformerLayout,
}

fn copy_rows<T: Scalar>(dst: &mut [T], vocab: &Vocabulary, src: &EmbeddingMatrix<T>, d: usize, ids: impl Iterator<Item = usize>) -> Result<()> {
    if src.dim() != d {
        return Err(Error::DimensionMismatch(format!("embedding dim {} vs model dim {d}", src.dim())));
    }
    let mut missing = Vec::new();
    for id in ids {
        match src.row_of(vocab.token(id)) {
            Some(row) => dst[id * d..(id + 1) * d].copy_from_slice(row),
            None => missing.push(vocab.token(id).to_string()),
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingRows(missing))
    }
}

impl<T: Scalar> MlmModel<T> {
    /// Builds a seeded model. Aligned modes overwrite every regular row of
    /// the token table with the matching source row; special rows stay random.
    pub fn init(config: &TransformerConfig, vocab: Vocabulary, mode: &InitMode<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "config vocab_size {} vs vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        if vocab.specials().mask.is_none() || vocab.specials().pad.is_none() {
            return Err(Error::VocabMismatch("vocabulary lacks <mask> or <pad>".into()));
        }
        let mut store = ParamStore::new();
        let layout = add_encoder(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed));
        if let InitMode::AlignedFinetuned(src) | InitMode::AlignedFrozen(src) = mode {
            let table = &mut store.get_mut(layout.emb.tokens).tensor.data;
            copy_rows(table, &vocab, src, config.model_dim, vocab.regular_ids())?;
        }
        if let InitMode::AlignedFrozen(_) = mode {
            store.set_trainable(layout.emb.tokens, false);
        }
        Ok(MlmModel { config: config.clone(), vocab, store, layout })
    }

    /// The token table as an embedding matrix over the model vocabulary.
    pub fn embedding_matrix(&self) -> EmbeddingMatrix<T> {
        EmbeddingMatrix::new(self.vocab.clone(), self.store.value(self.layout.emb.tokens).to_vec(), self.config.model_dim)
            .expect("table matches vocabulary")
    }

    pub fn embeddings_frozen(&self) -> bool {
        !self.store.get(self.layout.emb.tokens).trainable
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { config: self.config.clone(), vocab_hash: self.vocab.content_hash(), store: self.store.clone() }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>, vocab: Vocabulary) -> Result<Self> {
        if ckpt.vocab_hash != vocab.content_hash() || ckpt.config.vocab_size != vocab.len() {
            return Err(Error::VocabMismatch("checkpoint was trained with a different vocabulary".into()));
        }
        let layout = TransformerLayout::resolve(&ckpt.store, &ckpt.config, false)?;
        Ok(MlmModel { config: ckpt.config, vocab, store: ckpt.store, layout })
    }

    /// `[BOS] ids [EOS]` per sentence, truncated to the position budget.
    pub fn encode_corpus(&self, corpus: &Corpus) -> Vec<Vec<usize>> {
        encode_sentences(&self.vocab, corpus, self.config.max_positions)
    }
}

pub(crate) fn encode_sentences(vocab: &Vocabulary, corpus: &Corpus, max_positions: usize) -> Vec<Vec<usize>> {
    let sp = vocab.specials();
    let (bos, eos) = (sp.bos.expect("vocabulary has <s>"), sp.eos.expect("vocabulary has </s>"));
    let room = max_positions.saturating_sub(2);
    corpus
        .sentences
        .iter()
        .map(|s| {
            let mut ids = Vec::with_capacity(s.len().min(room) + 2);
            ids.push(bos);
            ids.extend(s.iter().take(room).map(|t| vocab.encode(t)));
            ids.push(eos);
            ids
        })
        .collect()
}

/// Masked inputs with a target at each selected position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<Option<usize>>>,
}

impl MaskedBatch {
    pub fn n_targets(&self) -> usize {
        self.targets.iter().flatten().filter(|t| t.is_some()).count()
    }
}

/// Selects each regular-token position with probability `mask_rate` and
/// replaces it with MASK, a uniform random regular token, or itself.
pub fn mask_batch(batch: &[Vec<usize>], vocab: &Vocabulary, policy: &MaskingPolicy, rng: &mut impl Rng) -> MaskedBatch {
    let mask = vocab.specials().mask.expect("vocabulary has <mask>");
    let regular = vocab.regular_ids();
    let mut inputs = batch.to_vec();
    let mut targets: Vec<Vec<Option<usize>>> = batch.iter().map(|s| vec![None; s.len()]).collect();
    for (s, t) in inputs.iter_mut().zip(targets.iter_mut()) {
        for (x, tgt) in s.iter_mut().zip(t.iter_mut()) {
            if vocab.is_special(*x) || rng.random::<f64>() >= policy.mask_rate {
                continue;
            }
            *tgt = Some(*x);
            let u: f64 = rng.random();
            if u < policy.mask_share {
                *x = mask;
            } else if u < policy.mask_share + policy.random_share && !regular.is_empty() {
                *x = rng.random_range(regular.clone());
            }
        }
    }
    MaskedBatch { inputs, targets }
}

/// Records the MLM loss of a masked batch on `tape`; `None` when nothing is
/// masked. Passing a dropout rng enables training-mode dropout.
pub fn mlm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &MlmModel<T>,
    batch: &MaskedBatch,
    lang: usize,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Option<crate::neural::Var>> {
    let pad = model.vocab.specials().pad.expect("vocabulary has <pad>");
    let padded = PaddedBatch::new(&batch.inputs, pad);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, t) in batch.targets.iter().enumerate() {
        for (i, tgt) in t.iter().enumerate() {
            if let Some(id) = tgt {
                rows.push(b * padded.len + i);
                targets.push(Some(*id));
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let langs = vec![lang; padded.batch];
    let h = encoder_forward(tape, &model.store, &model.layout, &model.config, &padded, &langs, dropout)?;
    let h = tape.gather_rows(h, &rows);
    let logits = output_logits(tape, &model.store, &model.layout, h);
    Ok(Some(tape.cross_entropy(logits, &targets)))
}

/// One optimizer step; `None` (and no update) when nothing is masked.
pub fn mlm_step<T: Scalar>(
    model: &mut MlmModel<T>,
    adam: &mut Adam,
    batch: &MaskedBatch,
    lang: usize,
    dropout: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let Some(loss) = mlm_loss(&mut tape, model, batch, lang, Some(dropout))? else {
        return Ok(None);
    };
    let value = tape.scalar(loss).f64();
    tape.backward(loss, &mut model.store)?;
    adam.step(&mut model.store);
    Ok(Some(value))
}

/// `exp` of the mean masked-token cross-entropy under masking drawn from
/// `seed`, evaluated without dropout.
pub fn perplexity<T: Scalar>(
    model: &MlmModel<T>,
    sentences: &[Vec<usize>],
    lang: usize,
    policy: &MaskingPolicy,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in sentences.chunks(batch_size.max(1)) {
        let masked = mask_batch(chunk, &model.vocab, policy, &mut rng);
        let n = masked.n_targets();
        let mut tape = Tape::new();
        if let Some(loss) = mlm_loss(&mut tape, model, &masked, lang, None)? {
            total += tape.scalar(loss).f64() * n as f64;
            count += n;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no masked positions in evaluation corpus"));
    }
    Ok((total / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmTrainConfig {
    pub steps: usize,
    /// Sentences per batch.
    pub batch_size: usize,
    pub policy: MaskingPolicy,
    pub schedule: StreamSchedule,
    pub adam: AdamConfig,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for MlmTrainConfig {
    fn default() -> Self {
        MlmTrainConfig {
            steps: 1000,
            batch_size: 32,
            policy: MaskingPolicy::default(),
            schedule: StreamSchedule::default(),
            adam: AdamConfig::default(),
            eval_every: 0,
            seed: 1,
        }
    }
}

impl MlmTrainConfig {
    pub fn validate(&self, n_langs: usize) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.policy.validate(), self.schedule.validate(n_langs), self.adam.validate()] {
            if let Err(Error::Config(e)) = r {
                errs.extend(e);
            }
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmMetricRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    /// Validation perplexity per language.
    pub valid_perplexity: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MlmMetrics {
    pub rows: Vec<MlmMetricRow>,
}

impl MlmMetrics {
    /// Tab-separated: step, train loss, then one perplexity per language.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = write!(s, "{}\t{:.6}", r.step, r.train_loss);
            for p in &r.valid_perplexity {
                let _ = write!(s, "\t{p:.6}");
            }
            s.push('\n');
        }
        s
    }
}

const VALID_SEED: u64 = 0x5eed;

/// Trains on batches drawn from `corpora[lang]` with `lang` sampled from the
/// schedule. A language with weight 0 is never read.
pub fn train_mlm<T: Scalar>(
    model: &mut MlmModel<T>,
    corpora: &[&Corpus],
    valid: &[&Corpus],
    cfg: &MlmTrainConfig,
) -> Result<MlmMetrics> {
    cfg.validate(corpora.len())?;
    if corpora.len() > model.config.n_langs || valid.len() > model.config.n_langs {
        return Err(Error::invalid("more corpora than model languages"));
    }
    let weights = &cfg.schedule.weights;
    if corpora.iter().zip(weights).any(|(c, &w)| w > 0.0 && c.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let train: Vec<Vec<Vec<usize>>> = corpora
        .iter()
        .zip(weights)
        .map(|(c, &w)| if w > 0.0 { model.encode_corpus(c) } else { Vec::new() })
        .collect();
    let valid: Vec<Vec<Vec<usize>>> = valid.iter().map(|c| model.encode_corpus(c)).collect();
    let lang_dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0d0);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut metrics = MlmMetrics::default();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    for step in 1..=cfg.steps {
        let lang = lang_dist.sample(&mut rng);
        let data = &train[lang];
        let batch: Vec<Vec<usize>> = (0..cfg.batch_size).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
        let masked = mask_batch(&batch, &model.vocab, &cfg.policy, &mut rng);
        if let Some(l) = mlm_step(model, &mut adam, &masked, lang, &mut drop_rng)? {
            loss_sum += l;
            loss_n += 1;
        }
        let checkpoint = if cfg.eval_every > 0 { step % cfg.eval_every == 0 } else { step == cfg.steps };
        if checkpoint {
            let valid_perplexity = valid
                .iter()
                .enumerate()
                .map(|(l, v)| perplexity(model, v, l, &cfg.policy, VALID_SEED, cfg.batch_size))
                .collect::<Result<Vec<_>>>()?;
            metrics.rows.push(MlmMetricRow {
                step,
                train_loss: if loss_n == 0 { 0.0 } else { loss_sum / loss_n as f64 },
                valid_perplexity,
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    if !model.store.all_finite() {
        return Err(Error::invalid("training diverged: non-finite parameters"));
    }
    Ok(metrics)
}

/// Initialization of rows added by [`extend_vocab`].
#[derive(Debug, Clone)]
pub enum ExtendInit<T> {
    /// N(0, 1/d) rows from the seed.
    Random { seed: u64 },
    /// Rows copied from a matrix that must cover every new token.
    Aligned(EmbeddingMatrix<T>),
}

/// Grows the token table (and output bias) to `new_vocab`. Tokens already
/// known keep their rows, matched by surface form; new tokens are filled per
/// `init`.
pub fn extend_vocab<T: Scalar>(model: &MlmModel<T>, new_vocab: Vocabulary, init: &ExtendInit<T>) -> Result<MlmModel<T>> {
    let d = model.config.model_dim;
    let missing: Vec<String> =
        model.vocab.tokens().iter().filter(|t| new_vocab.id(t).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::VocabMismatch(format!("new vocabulary drops tokens {missing:?}")));
    }
    let old_table = model.store.value(model.layout.emb.tokens);
    let old_bias = model.store.value(model.layout.emb.pred_bias);
    let n = new_vocab.len();
    let mut table = vec![T::zero(); n * d];
    let mut bias = vec![T::zero(); n];
    let mut fresh = Vec::new();
    for id in 0..n {
        match model.vocab.id(new_vocab.token(id)) {
            Some(old) => {
                table[id * d..(id + 1) * d].copy_from_slice(&old_table[old * d..(old + 1) * d]);
                bias[id] = old_bias[old];
            }
            None => fresh.push(id),
        }
    }
    match init {
        ExtendInit::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
            for &id in &fresh {
                for x in &mut table[id * d..(id + 1) * d] {
                    *x = T::of(normal.sample(&mut rng));
                }
            }
        }
        ExtendInit::Aligned(src) => copy_rows(&mut table, &new_vocab, src, d, fresh.iter().copied())?,
    }

    let mut store = ParamStore::new();
    for (id, p) in model.store.iter() {
        let (shape, data) = if id == model.layout.emb.tokens {
            (vec![n, d], table.clone())
        } else if id == model.layout.emb.pred_bias {
            (vec![n], bias.clone())
        } else {
            (p.tensor.shape.clone(), p.tensor.data.clone())
        };
        let new_id = store.add(p.name.clone(), shape, data);
        store.set_trainable(new_id, p.trainable);
    }
    let config = TransformerConfig { vocab_size: n, ..model.config.clone() };
    Ok(MlmModel { config, vocab: new_vocab, store, layout: model.layout.clone() })
}
