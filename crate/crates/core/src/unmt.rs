//! Encoder-decoder transfer from a masked LM, denoising auto-encoding,
//! online back-translation and decoding.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{detokenize, remove_bpe, Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::mlm::{encode_sentences, MlmModel};
use crate::neural::{
    add_decoder_layers, decoder_forward, encoder_forward, output_logits, Adam, AdamConfig, Checkpoint, PaddedBatch,
    ParamStore, Tape, TransformerConfig, TransformerLayout, Var,
};
use crate::scalar::Scalar;

/// Encoder-decoder sharing one token table across encoder input, decoder
/// input and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq<T> {
    pub config: TransformerConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub layout: TransformerLayout,
}

/// Copies the MLM into the encoder and into every decoder sublayer it has a
/// counterpart for; cross-attention is drawn from `seed`. Every parameter is
/// trainable afterwards, including a table frozen during MLM training.
pub fn init_unmt_from_mlm<T: Scalar>(mlm: &MlmModel<T>, config: &TransformerConfig, seed: u64) -> Result<Seq2Seq<T>> {
    if config.layers != mlm.config.layers {
        return Err(Error::DimensionMismatch(format!(
            "{} decoder layers requested for a {}-layer MLM",
            config.layers, mlm.config.layers
        )));
    }
    let same_shape = config.model_dim == mlm.config.model_dim
        && config.heads == mlm.config.heads
        && config.ffn_dim == mlm.config.ffn_dim
        && config.max_positions == mlm.config.max_positions
        && config.n_langs == mlm.config.n_langs;
    if !same_shape {
        return Err(Error::DimensionMismatch("encoder-decoder dimensions differ from the MLM".into()));
    }
    let mut store = mlm.store.clone();
    store.iter_mut().for_each(|p| p.trainable = true);
    let mut layout = mlm.layout.clone();
    let config = TransformerConfig { vocab_size: mlm.config.vocab_size, ..config.clone() };
    add_decoder_layers(&mut store, &mut layout, &config, &mut ChaCha8Rng::seed_from_u64(seed));
    for (enc, dec) in layout.encoder.clone().iter().zip(layout.decoder.clone()) {
        let pairs = [
            (enc.attn.q.weight, dec.attn.q.weight),
            (enc.attn.q.bias, dec.attn.q.bias),
            (enc.attn.k.weight, dec.attn.k.weight),
            (enc.attn.k.bias, dec.attn.k.bias),
            (enc.attn.v.weight, dec.attn.v.weight),
            (enc.attn.v.bias, dec.attn.v.bias),
            (enc.attn.out.weight, dec.attn.out.weight),
            (enc.attn.out.bias, dec.attn.out.bias),
            (enc.ln1.gain, dec.ln1.gain),
            (enc.ln1.bias, dec.ln1.bias),
            (enc.ffn1.weight, dec.ffn1.weight),
            (enc.ffn1.bias, dec.ffn1.bias),
            (enc.ffn2.weight, dec.ffn2.weight),
            (enc.ffn2.bias, dec.ffn2.bias),
            (enc.ln2.gain, dec.ln2.gain),
            (enc.ln2.bias, dec.ln2.bias),
        ];
        for (src, dst) in pairs {
            let data = store.value(src).to_vec();
            store.get_mut(dst).tensor.data = data;
        }
    }
    Ok(Seq2Seq { config, vocab: mlm.vocab.clone(), store, layout })
}

impl<T: Scalar> Seq2Seq<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { config: self.config.clone(), vocab_hash: self.vocab.content_hash(), store: self.store.clone() }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>, vocab: Vocabulary) -> Result<Self> {
        if ckpt.vocab_hash != vocab.content_hash() || ckpt.config.vocab_size != vocab.len() {
            return Err(Error::VocabMismatch("checkpoint was trained with a different vocabulary".into()));
        }
        let layout = TransformerLayout::resolve(&ckpt.store, &ckpt.config, true)?;
        Ok(Seq2Seq { config: ckpt.config, vocab, store: ckpt.store, layout })
    }

    fn ids(&self) -> (usize, usize, usize, usize) {
        let sp = self.vocab.specials();
        (
            sp.pad.expect("vocabulary has <pad>"),
            sp.unk.expect("vocabulary has <unk>"),
            sp.bos.expect("vocabulary has <s>"),
            sp.eos.expect("vocabulary has </s>"),
        )
    }

    /// Token ids of a corpus without sentence markers.
    pub fn encode_corpus(&self, corpus: &Corpus) -> Vec<Vec<usize>> {
        encode_sentences(&self.vocab, corpus, self.config.max_positions)
            .into_iter()
            .map(|s| s[1..s.len() - 1].to_vec())
            .collect()
    }

    /// Detokenized text of an id sequence; specials are dropped and BPE
    /// pieces joined.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let toks: Vec<String> =
            ids.iter().filter(|&&i| !self.vocab.is_special(i)).map(|&i| self.vocab.token(i).to_string()).collect();
        detokenize(&remove_bpe(&toks))
    }

    fn max_len(&self, src_len: usize) -> usize {
        let budget = (1.5 * src_len as f64).floor() as usize + 5;
        budget.min(self.config.max_positions - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub drop_prob: f64,
    pub blank_prob: f64,
    pub shuffle_window: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { drop_prob: 0.1, blank_prob: 0.1, shuffle_window: 3 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.drop_prob) {
            errs.push(format!("drop_prob {} must be in [0, 1)", self.drop_prob));
        }
        if !(0.0..1.0).contains(&self.blank_prob) {
            errs.push(format!("blank_prob {} must be in [0, 1)", self.blank_prob));
        }
        if self.shuffle_window == 0 {
            errs.push("shuffle_window must be at least 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Local shuffle (sort by `i + U[0, k)`), then word dropout keeping at least
/// one token, then blanking to `unk`.
pub fn noise(sentence: &[usize], cfg: &NoiseConfig, unk: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = sentence
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let jitter = if cfg.shuffle_window > 1 { rng.random_range(0.0..cfg.shuffle_window as f64) } else { 0.0 };
            (i as f64 + jitter, t)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let shuffled: Vec<usize> = keyed.into_iter().map(|(_, t)| t).collect();
    let mut kept: Vec<usize> = shuffled.iter().copied().filter(|_| rng.random::<f64>() >= cfg.drop_prob).collect();
    if kept.is_empty() && !shuffled.is_empty() {
        kept.push(shuffled[rng.random_range(0..shuffled.len())]);
    }
    for t in &mut kept {
        if rng.random::<f64>() < cfg.blank_prob {
            *t = unk;
        }
    }
    kept
}

/// Teacher-forced translation loss: encoder reads `[BOS] src [EOS]` in
/// `src_lang`, decoder reads `[BOS] tgt` in `tgt_lang` and predicts `tgt [EOS]`.
#[allow(clippy::too_many_arguments)]
pub fn seq2seq_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Seq2Seq<T>,
    src: &[Vec<usize>],
    src_lang: usize,
    tgt: &[Vec<usize>],
    tgt_lang: usize,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if src.len() != tgt.len() || src.is_empty() {
        return Err(Error::invalid("source and target batches must be equal and non-empty"));
    }
    let (pad, _, bos, eos) = model.ids();
    let enc_in: Vec<Vec<usize>> = src.iter().map(|s| wrap(bos, s, eos, model.config.max_positions)).collect();
    let room = model.config.max_positions - 1;
    let dec_in: Vec<Vec<usize>> = tgt.iter().map(|t| std::iter::once(bos).chain(t.iter().take(room).copied()).collect()).collect();
    let enc_batch = PaddedBatch::new(&enc_in, pad);
    let dec_batch = PaddedBatch::new(&dec_in, pad);
    let h = encoder_forward(tape, &model.store, &model.layout, &model.config, &enc_batch, &vec![src_lang; src.len()], dropout.as_deref_mut())?;
    let d = decoder_forward(
        tape,
        &model.store,
        &model.layout,
        &model.config,
        &dec_batch,
        &vec![tgt_lang; tgt.len()],
        h,
        &enc_batch.padding(),
        dropout,
    )?;
    let logits = output_logits(tape, &model.store, &model.layout, d);
    let mut targets = Vec::with_capacity(dec_batch.batch * dec_batch.len);
    for (b, t) in tgt.iter().enumerate() {
        let n = dec_batch.lengths[b];
        for i in 0..dec_batch.len {
            targets.push(match i.cmp(&(n - 1)) {
                std::cmp::Ordering::Less => Some(t[i]),
                std::cmp::Ordering::Equal => Some(eos),
                std::cmp::Ordering::Greater => None,
            });
        }
    }
    Ok(tape.cross_entropy(logits, &targets))
}

fn wrap(bos: usize, s: &[usize], eos: usize, max_positions: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(s.len() + 2);
    v.push(bos);
    v.extend(s.iter().take(max_positions.saturating_sub(2)));
    v.push(eos);
    v
}

fn train_on<T: Scalar>(
    model: &mut Seq2Seq<T>,
    adam: &mut Adam,
    src: &[Vec<usize>],
    src_lang: usize,
    tgt: &[Vec<usize>],
    tgt_lang: usize,
    dropout: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = seq2seq_loss(&mut tape, model, src, src_lang, tgt, tgt_lang, Some(dropout))?;
    let value = tape.scalar(loss).f64();
    tape.backward(loss, &mut model.store)?;
    adam.step(&mut model.store);
    Ok(value)
}

/// Denoising step: reconstruct `batch` from its noised version within `lang`.
pub fn dae_step<T: Scalar>(
    model: &mut Seq2Seq<T>,
    adam: &mut Adam,
    batch: &[Vec<usize>],
    lang: usize,
    cfg: &NoiseConfig,
    rng: &mut ChaCha8Rng,
    dropout: &mut ChaCha8Rng,
) -> Result<f64> {
    let (_, unk, _, _) = model.ids();
    let noisy: Vec<Vec<usize>> = batch.iter().map(|s| noise(s, cfg, unk, rng)).collect();
    train_on(model, adam, &noisy, lang, batch, lang, dropout)
}

/// Online back-translation step: translate `batch` into `tgt_lang` with the
/// current weights (no gradient), then train `tgt_lang → src_lang` on the
/// synthetic pairs.
pub fn bt_step<T: Scalar>(
    model: &mut Seq2Seq<T>,
    adam: &mut Adam,
    batch: &[Vec<usize>],
    src_lang: usize,
    tgt_lang: usize,
    dropout: &mut ChaCha8Rng,
) -> Result<f64> {
    let synthetic = greedy_batch(model, batch, src_lang, tgt_lang)?;
    train_on(model, adam, &synthetic, tgt_lang, batch, src_lang, dropout)
}

/// Encoder output kept as plain values so decoding steps can reuse it.
struct Encoded<T> {
    states: Vec<T>,
    padding: Vec<bool>,
    len: usize,
}

fn encode<T: Scalar>(model: &Seq2Seq<T>, src: &[Vec<usize>], lang: usize) -> Result<Encoded<T>> {
    let (pad, _, bos, eos) = model.ids();
    let enc_in: Vec<Vec<usize>> = src.iter().map(|s| wrap(bos, s, eos, model.config.max_positions)).collect();
    let batch = PaddedBatch::new(&enc_in, pad);
    let mut tape = Tape::new();
    let h = encoder_forward::<T, ChaCha8Rng>(&mut tape, &model.store, &model.layout, &model.config, &batch, &vec![lang; src.len()], None)?;
    Ok(Encoded { states: tape.value(h).to_vec(), padding: batch.padding(), len: batch.len })
}

/// Log-probabilities of the next token for each `(source row, prefix)`.
fn next_log_probs<T: Scalar>(
    model: &Seq2Seq<T>,
    enc: &Encoded<T>,
    rows: &[usize],
    prefixes: &[Vec<usize>],
    lang: usize,
) -> Result<Vec<Vec<f64>>> {
    let (pad, _, bos, _) = model.ids();
    let d = model.config.model_dim;
    let mut states = Vec::with_capacity(rows.len() * enc.len * d);
    let mut padding = Vec::with_capacity(rows.len() * enc.len);
    for &r in rows {
        states.extend_from_slice(&enc.states[r * enc.len * d..(r + 1) * enc.len * d]);
        padding.extend_from_slice(&enc.padding[r * enc.len..(r + 1) * enc.len]);
    }
    let dec_in: Vec<Vec<usize>> = prefixes.iter().map(|p| std::iter::once(bos).chain(p.iter().copied()).collect()).collect();
    let batch = PaddedBatch::new(&dec_in, pad);
    let mut tape = Tape::new();
    let h = tape.constant(states, vec![rows.len() * enc.len, d]);
    let out = decoder_forward::<T, ChaCha8Rng>(&mut tape, &model.store, &model.layout, &model.config, &batch, &vec![lang; rows.len()], h, &padding, None)?;
    let last: Vec<usize> = (0..rows.len()).map(|b| b * batch.len + batch.lengths[b] - 1).collect();
    let h = tape.gather_rows(out, &last);
    let logits = output_logits(&mut tape, &model.store, &model.layout, h);
    let v = model.config.vocab_size;
    Ok(tape
        .value(logits)
        .chunks(v)
        .map(|row| {
            let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
            row.iter().map(|x| x.f64() - lse).collect()
        })
        .collect())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Batched greedy decoding without markers; sentences stop at EOS or at
/// `1.5 · |src| + 5` tokens.
pub fn greedy_batch<T: Scalar>(model: &Seq2Seq<T>, src: &[Vec<usize>], src_lang: usize, tgt_lang: usize) -> Result<Vec<Vec<usize>>> {
    let (_, _, _, eos) = model.ids();
    let enc = encode(model, src, src_lang)?;
    let limits: Vec<usize> = src.iter().map(|s| model.max_len(s.len())).collect();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); src.len()];
    let mut live: Vec<usize> = (0..src.len()).filter(|&i| limits[i] > 0).collect();
    while !live.is_empty() {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|&i| out[i].clone()).collect();
        let lp = next_log_probs(model, &enc, &live, &prefixes, tgt_lang)?;
        let mut still = Vec::with_capacity(live.len());
        for (&i, row) in live.iter().zip(&lp) {
            let tok = argmax(row);
            if tok == eos {
                continue;
            }
            out[i].push(tok);
            if out[i].len() < limits[i] {
                still.push(i);
            }
        }
        live = still;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum output length is `max_len_factor · |src| + max_len_offset`.
    pub max_len_factor: f64,
    pub max_len_offset: usize,
    /// Length penalty exponent α in `score / len^α`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_size: 5, max_len_factor: 1.5, max_len_offset: 5, length_penalty: 1.0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.beam_size == 0 {
            errs.push("beam_size must be at least 1".to_string());
        }
        if !(self.max_len_factor >= 0.0) {
            errs.push("max_len_factor must be non-negative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn max_len(&self, src_len: usize, max_positions: usize) -> usize {
        ((self.max_len_factor * src_len as f64).floor() as usize + self.max_len_offset).min(max_positions - 1)
    }
}

/// A decoded sequence, ending in EOS unless it hit the length limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / len^α`.
    pub score: f64,
}

fn penalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

/// Greedy decoding of one sentence under `cfg`'s length limit.
pub fn greedy_decode<T: Scalar>(model: &Seq2Seq<T>, src: &[usize], src_lang: usize, tgt_lang: usize, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let (_, _, _, eos) = model.ids();
    let enc = encode(model, &[src.to_vec()], src_lang)?;
    let limit = cfg.max_len(src.len(), model.config.max_positions);
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < limit {
        let lp = next_log_probs(model, &enc, &[0], &[tokens.clone()], tgt_lang)?.remove(0);
        let tok = argmax(&lp);
        log_prob += lp[tok];
        tokens.push(tok);
        if tok == eos {
            break;
        }
    }
    let score = penalized(log_prob, tokens.len(), cfg.length_penalty);
    Ok(Hypothesis { tokens, log_prob, score })
}

/// Beam search maximizing `log P / len^α`. Each step keeps the `beam_size`
/// best extensions; those ending in EOS leave the beam. With `beam_size = 1`
/// this is exactly greedy decoding. For wider beams the greedy hypothesis
/// joins the finished pool, so the result never scores below it.
pub fn beam_search<T: Scalar>(model: &Seq2Seq<T>, src: &[usize], src_lang: usize, tgt_lang: usize, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    if src.is_empty() {
        return Err(Error::invalid("cannot decode an empty source"));
    }
    let (_, _, _, eos) = model.ids();
    let enc = encode(model, &[src.to_vec()], src_lang)?;
    let limit = cfg.max_len(src.len(), model.config.max_positions);
    let alpha = cfg.length_penalty;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..limit {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let lp = next_log_probs(model, &enc, &vec![0; live.len()], &prefixes, tgt_lang)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lp[0].len());
        for (h, row) in lp.iter().enumerate() {
            for (tok, &l) in row.iter().enumerate() {
                cands.push((live[h].1 + l, h, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam_size);
        for &(total, h, tok) in cands.iter().take(cfg.beam_size) {
            let mut tokens = live[h].0.clone();
            tokens.push(tok);
            if tok == eos {
                let score = penalized(total, tokens.len(), alpha);
                finished.push(Hypothesis { tokens, log_prob: total, score });
            } else {
                next.push((tokens, total));
            }
        }
        live = next;
    }
    finished.extend(live.into_iter().map(|(tokens, total)| {
        let score = penalized(total, tokens.len(), alpha);
        Hypothesis { tokens, log_prob: total, score }
    }));
    if cfg.beam_size > 1 {
        finished.push(greedy_decode(model, src, src_lang, tgt_lang, cfg)?);
    }
    finished
        .into_iter()
        .reduce(|best, h| if h.score > best.score { h } else { best })
        .ok_or_else(|| Error::invalid("decoding produced no hypothesis"))
}

/// Translates sentences to detokenized text with beam search.
pub fn translate<T: Scalar>(model: &Seq2Seq<T>, corpus: &Corpus, src_lang: usize, tgt_lang: usize, cfg: &DecodeConfig) -> Result<Vec<String>> {
    model
        .encode_corpus(corpus)
        .iter()
        .map(|s| {
            if s.is_empty() {
                return Ok(String::new());
            }
            let h = if cfg.beam_size == 1 {
                greedy_decode(model, s, src_lang, tgt_lang, cfg)?
            } else {
                beam_search(model, s, src_lang, tgt_lang, cfg)?
            };
            Ok(model.decode_text(&h.tokens))
        })
        .collect()
}

/// Held-out parallel data scored with greedy decoding.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub src_lang: usize,
    pub tgt_lang: usize,
    pub sources: Corpus,
    /// Detokenized reference sentences.
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnmtTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub noise: NoiseConfig,
    pub adam: AdamConfig,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: usize,
    /// Validations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for UnmtTrainConfig {
    fn default() -> Self {
        UnmtTrainConfig {
            steps: 2000,
            batch_size: 32,
            noise: NoiseConfig::default(),
            adam: AdamConfig::default(),
            eval_every: 0,
            patience: 10,
            seed: 1,
        }
    }
}

impl UnmtTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.noise.validate(), self.adam.validate()] {
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

/// The four objectives in their round-robin order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Dae1,
    Dae2,
    Bt12,
    Bt21,
}

pub const ROUND_ROBIN: [Objective; 4] = [Objective::Dae1, Objective::Dae2, Objective::Bt12, Objective::Bt21];

#[derive(Debug, Clone, PartialEq)]
pub struct UnmtMetricRow {
    pub step: usize,
    /// Mean loss per objective since the previous row, in round-robin order.
    pub losses: [f64; 4],
    pub valid_bleu: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnmtMetrics {
    pub rows: Vec<UnmtMetricRow>,
    pub best_step: usize,
    pub best_bleu: f64,
    pub stopped_early: bool,
}

impl UnmtMetrics {
    /// Tab-separated: step, DAE-1, DAE-2, BT-12, BT-21 losses, valid BLEU.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = write!(s, "{}", r.step);
            for l in r.losses {
                let _ = write!(s, "\t{l:.6}");
            }
            let _ = writeln!(s, "\t{:.4}", r.valid_bleu);
        }
        s
    }
}

/// Greedy-decoding corpus BLEU of a validation set.
pub fn validation_bleu<T: Scalar>(model: &Seq2Seq<T>, valid: &ValidationSet, batch_size: usize) -> Result<f64> {
    let src = model.encode_corpus(&valid.sources);
    let mut hyps = Vec::with_capacity(src.len());
    for chunk in src.chunks(batch_size.max(1)) {
        for out in greedy_batch(model, chunk, valid.src_lang, valid.tgt_lang)? {
            hyps.push(model.decode_text(&out));
        }
    }
    Ok(bleu(&hyps, &valid.references)?.bleu)
}

/// Round-robin DAE-1, DAE-2, BT 1→2→1, BT 2→1→2. With validation sets,
/// keeps the parameters of the best mean validation BLEU and stops after
/// `patience` validations without improvement.
pub fn train_unmt<T: Scalar>(
    model: &mut Seq2Seq<T>,
    corpora: [&Corpus; 2],
    valid: &[ValidationSet],
    cfg: &UnmtTrainConfig,
) -> Result<UnmtMetrics> {
    cfg.validate()?;
    if corpora.iter().any(|c| c.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let data: Vec<Vec<Vec<usize>>> = corpora.iter().map(|c| model.encode_corpus(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0d0);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut metrics = UnmtMetrics { best_bleu: f64::NEG_INFINITY, ..Default::default() };
    let mut best_store: Option<ParamStore<T>> = None;
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    let mut stale = 0;

    for step in 1..=cfg.steps {
        let slot = (step - 1) % 4;
        let lang = match ROUND_ROBIN[slot] {
            Objective::Dae1 | Objective::Bt12 => 0,
            Objective::Dae2 | Objective::Bt21 => 1,
        };
        let pool = &data[lang];
        let mut batch: Vec<Vec<usize>> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            let s = &pool[rng.random_range(0..pool.len())];
            if !s.is_empty() {
                batch.push(s.clone());
            } else if pool.iter().all(Vec::is_empty) {
                return Err(Error::EmptyCorpus);
            }
        }
        let loss = match ROUND_ROBIN[slot] {
            Objective::Dae1 | Objective::Dae2 => dae_step(model, &mut adam, &batch, lang, &cfg.noise, &mut rng, &mut drop_rng)?,
            Objective::Bt12 | Objective::Bt21 => bt_step(model, &mut adam, &batch, lang, 1 - lang, &mut drop_rng)?,
        };
        sums[slot] += loss;
        counts[slot] += 1;

        let due = if cfg.eval_every > 0 { step % cfg.eval_every == 0 || step == cfg.steps } else { step == cfg.steps };
        if due {
            let mut valid_bleu = 0.0;
            for v in valid {
                valid_bleu += validation_bleu(model, v, cfg.batch_size)? / valid.len() as f64;
            }
            let losses = std::array::from_fn(|i| if counts[i] == 0 { 0.0 } else { sums[i] / counts[i] as f64 });
            metrics.rows.push(UnmtMetricRow { step, losses, valid_bleu });
            sums = [0.0; 4];
            counts = [0; 4];
            if !valid.is_empty() {
                if valid_bleu > metrics.best_bleu {
                    metrics.best_bleu = valid_bleu;
                    metrics.best_step = step;
                    best_store = Some(model.store.clone());
                    stale = 0;
                } else {
                    stale += 1;
                    if cfg.patience > 0 && stale >= cfg.patience {
                        metrics.stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    if let Some(best) = best_store {
        model.store = best;
    }
    if !model.store.all_finite() {
        return Err(Error::invalid("training diverged: non-finite parameters"));
    }
    if metrics.best_bleu == f64::NEG_INFINITY {
        metrics.best_bleu = 0.0;
    }
    Ok(metrics)
}


#[cfg(test)]
mod tests;
