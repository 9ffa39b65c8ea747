//! Post-norm transformer encoder and decoder over a [`ParamStore`].
//!
//! Inputs are the sum of token, learned position and language embeddings,
//! layer-normalized. Each block is `LN(x + sublayer(x))`. The output
//! projection reuses the token table (tied) plus a free bias.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{AttentionSpec, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub n_langs: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            max_positions: 128,
            vocab_size: 0,
            n_langs: 2,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("layers must be positive".to_string());
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            errs.push(format!("model_dim {} must be a positive multiple of heads {}", self.model_dim, self.heads));
        }
        if self.ffn_dim == 0 {
            errs.push("ffn_dim must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.max_positions == 0 {
            errs.push("max_positions must be positive".to_string());
        }
        if self.vocab_size == 0 {
            errs.push("vocab_size must be positive".to_string());
        }
        if self.n_langs == 0 {
            errs.push("n_langs must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// `key=value` lines, stable order.
    pub fn to_text(&self) -> String {
        format!(
            "layers={}\nmodel_dim={}\nheads={}\nffn_dim={}\ndropout={}\nmax_positions={}\nvocab_size={}\nn_langs={}\n",
            self.layers,
            self.model_dim,
            self.heads,
            self.ffn_dim,
            self.dropout,
            self.max_positions,
            self.vocab_size,
            self.n_langs
        )
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TransformerConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { what: "transformer config", line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            let int = || v.parse::<usize>().map_err(|e| err(format!("{k}: {e}")));
            match k {
                "layers" => cfg.layers = int()?,
                "model_dim" => cfg.model_dim = int()?,
                "heads" => cfg.heads = int()?,
                "ffn_dim" => cfg.ffn_dim = int()?,
                "dropout" => cfg.dropout = v.parse().map_err(|e| err(format!("dropout: {e}")))?,
                "max_positions" => cfg.max_positions = int()?,
                "vocab_size" => cfg.vocab_size = int()?,
                "n_langs" => cfg.n_langs = int()?,
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub out: LinearIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingIds {
    /// Token table, also the output projection.
    pub tokens: ParamId,
    pub positions: ParamId,
    pub langs: ParamId,
    pub norm: LayerNormIds,
    pub pred_bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub attn: AttentionIds,
    pub ln1: LayerNormIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub ln2: LayerNormIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub attn: AttentionIds,
    pub ln1: LayerNormIds,
    pub cross: AttentionIds,
    pub ln_cross: LayerNormIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub ln2: LayerNormIds,
}

/// Parameter handles of one model. The decoder is empty for a masked LM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerLayout {
    pub emb: EmbeddingIds,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
}

impl TransformerLayout {
    /// Looks every parameter up by name, e.g. after loading a checkpoint.
    pub fn resolve<T: Scalar>(store: &ParamStore<T>, cfg: &TransformerConfig, with_decoder: bool) -> Result<Self> {
        let mut missing = Vec::new();
        let mut get = |name: String| match store.id(&name) {
            Some(id) => id,
            None => {
                missing.push(name);
                ParamId(usize::MAX)
            }
        };
        let emb = EmbeddingIds {
            tokens: get("embeddings.weight".into()),
            positions: get("position_embeddings.weight".into()),
            langs: get("lang_embeddings.weight".into()),
            norm: LayerNormIds { gain: get("layer_norm_emb.weight".into()), bias: get("layer_norm_emb.bias".into()) },
            pred_bias: get("pred.bias".into()),
        };
        let lin = |get: &mut dyn FnMut(String) -> ParamId, p: String| LinearIds {
            weight: get(format!("{p}.weight")),
            bias: get(format!("{p}.bias")),
        };
        let ln = |get: &mut dyn FnMut(String) -> ParamId, p: String| LayerNormIds {
            gain: get(format!("{p}.weight")),
            bias: get(format!("{p}.bias")),
        };
        let attn = |get: &mut dyn FnMut(String) -> ParamId, p: String| AttentionIds {
            q: lin(get, format!("{p}.q")),
            k: lin(get, format!("{p}.k")),
            v: lin(get, format!("{p}.v")),
            out: lin(get, format!("{p}.out")),
        };
        let encoder = (0..cfg.layers)
            .map(|i| EncoderLayerIds {
                attn: attn(&mut get, format!("encoder.{i}.attn")),
                ln1: ln(&mut get, format!("encoder.{i}.ln1")),
                ffn1: lin(&mut get, format!("encoder.{i}.ffn.lin1")),
                ffn2: lin(&mut get, format!("encoder.{i}.ffn.lin2")),
                ln2: ln(&mut get, format!("encoder.{i}.ln2")),
            })
            .collect();
        let decoder = if with_decoder {
            (0..cfg.layers)
                .map(|i| DecoderLayerIds {
                    attn: attn(&mut get, format!("decoder.{i}.attn")),
                    ln1: ln(&mut get, format!("decoder.{i}.ln1")),
                    cross: attn(&mut get, format!("decoder.{i}.cross")),
                    ln_cross: ln(&mut get, format!("decoder.{i}.ln_cross")),
                    ffn1: lin(&mut get, format!("decoder.{i}.ffn.lin1")),
                    ffn2: lin(&mut get, format!("decoder.{i}.ffn.lin2")),
                    ln2: ln(&mut get, format!("decoder.{i}.ln2")),
                })
                .collect()
        } else {
            Vec::new()
        };
        if !missing.is_empty() {
            return Err(Error::invalid(format!("missing parameters: {}", missing.join(", "))));
        }
        Ok(TransformerLayout { emb, encoder, decoder })
    }
}

fn normal<T: Scalar>(n: usize, std: f64, rng: &mut impl Rng) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}

fn add_linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> LinearIds {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("valid bounds");
    let w = (0..fan_in * fan_out).map(|_| T::of(dist.sample(rng))).collect();
    let b = (0..fan_out).map(|_| T::of(dist.sample(rng))).collect();
    LinearIds {
        weight: store.add(format!("{name}.weight"), vec![fan_in, fan_out], w),
        bias: store.add(format!("{name}.bias"), vec![fan_out], b),
    }
}

fn add_layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> LayerNormIds {
    LayerNormIds {
        gain: store.add(format!("{name}.weight"), vec![d], vec![T::one(); d]),
        bias: store.add(format!("{name}.bias"), vec![d], vec![T::zero(); d]),
    }
}

fn add_attention<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> AttentionIds {
    AttentionIds {
        q: add_linear(store, &format!("{name}.q"), d, d, rng),
        k: add_linear(store, &format!("{name}.k"), d, d, rng),
        v: add_linear(store, &format!("{name}.v"), d, d, rng),
        out: add_linear(store, &format!("{name}.out"), d, d, rng),
    }
}

/// Adds embeddings and encoder layers in a fixed order so a seed fully
/// determines the initialization.
pub fn add_encoder<T: Scalar>(store: &mut ParamStore<T>, cfg: &TransformerConfig, rng: &mut impl Rng) -> TransformerLayout {
    let d = cfg.model_dim;
    let std = (d as f64).powf(-0.5);
    let emb = EmbeddingIds {
        tokens: store.add("embeddings.weight", vec![cfg.vocab_size, d], normal(cfg.vocab_size * d, std, rng)),
        positions: store.add("position_embeddings.weight", vec![cfg.max_positions, d], normal(cfg.max_positions * d, std, rng)),
        langs: store.add("lang_embeddings.weight", vec![cfg.n_langs, d], normal(cfg.n_langs * d, std, rng)),
        norm: add_layer_norm(store, "layer_norm_emb", d),
        pred_bias: store.add("pred.bias", vec![cfg.vocab_size], vec![T::zero(); cfg.vocab_size]),
    };
    let encoder = (0..cfg.layers)
        .map(|i| EncoderLayerIds {
            attn: add_attention(store, &format!("encoder.{i}.attn"), d, rng),
            ln1: add_layer_norm(store, &format!("encoder.{i}.ln1"), d),
            ffn1: add_linear(store, &format!("encoder.{i}.ffn.lin1"), d, cfg.ffn_dim, rng),
            ffn2: add_linear(store, &format!("encoder.{i}.ffn.lin2"), cfg.ffn_dim, d, rng),
            ln2: add_layer_norm(store, &format!("encoder.{i}.ln2"), d),
        })
        .collect();
    TransformerLayout { emb, encoder, decoder: Vec::new() }
}

/// Adds decoder layers (self-attention, cross-attention, FFN) to `layout`.
pub fn add_decoder_layers<T: Scalar>(
    store: &mut ParamStore<T>,
    layout: &mut TransformerLayout,
    cfg: &TransformerConfig,
    rng: &mut impl Rng,
) {
    let d = cfg.model_dim;
    layout.decoder = (0..cfg.layers)
        .map(|i| DecoderLayerIds {
            attn: add_attention(store, &format!("decoder.{i}.attn"), d, rng),
            ln1: add_layer_norm(store, &format!("decoder.{i}.ln1"), d),
            cross: add_attention(store, &format!("decoder.{i}.cross"), d, rng),
            ln_cross: add_layer_norm(store, &format!("decoder.{i}.ln_cross"), d),
            ffn1: add_linear(store, &format!("decoder.{i}.ffn.lin1"), d, cfg.ffn_dim, rng),
            ffn2: add_linear(store, &format!("decoder.{i}.ffn.lin2"), cfg.ffn_dim, d, rng),
            ln2: add_layer_norm(store, &format!("decoder.{i}.ln2"), d),
        })
        .collect();
}

/// Right-padded id matrix `[batch × len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(seqs: &[Vec<usize>], pad: usize) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
        }
        PaddedBatch { ids, batch: seqs.len(), len, lengths: seqs.iter().map(Vec::len).collect() }
    }

    /// `true` at padded positions.
    pub fn padding(&self) -> Vec<bool> {
        let mut pad = Vec::with_capacity(self.batch * self.len);
        for &l in &self.lengths {
            pad.extend((0..self.len).map(|t| t >= l));
        }
        pad
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..b * self.len + self.lengths[b]]
    }
}

fn check_batch(cfg: &TransformerConfig, batch: &PaddedBatch, langs: &[usize]) -> Result<()> {
    if batch.len > cfg.max_positions {
        return Err(Error::SequenceTooLong { len: batch.len, max: cfg.max_positions });
    }
    if let Some((position, &id)) = batch.ids.iter().enumerate().find(|(_, &id)| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { position, id, vocab_size: cfg.vocab_size });
    }
    if langs.len() != batch.batch {
        return Err(Error::invalid(format!("{} language ids for {} sentences", langs.len(), batch.batch)));
    }
    if let Some(&l) = langs.iter().find(|&&l| l >= cfg.n_langs) {
        return Err(Error::invalid(format!("language id {l} out of range for {} languages", cfg.n_langs)));
    }
    Ok(())
}

fn linear<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ids: LinearIds, x: Var) -> Var {
    let w = tape.param(store, ids.weight);
    let b = tape.param(store, ids.bias);
    let y = tape.matmul(x, w);
    tape.add_bias(y, b)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ids: LayerNormIds, x: Var) -> Var {
    let g = tape.param(store, ids.gain);
    let b = tape.param(store, ids.bias);
    tape.layer_norm(x, g, b)
}

fn attention_block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    ids: AttentionIds,
    x: Var,
    kv: Var,
    spec: AttentionSpec,
) -> Var {
    let q = linear(tape, store, ids.q, x);
    let k = linear(tape, store, ids.k, kv);
    let v = linear(tape, store, ids.v, kv);
    let a = tape.attention(q, k, v, spec);
    linear(tape, store, ids.out, a)
}

/// Dropout source for training; `None` evaluates deterministically.
pub type DropoutRng<'a, R> = Option<&'a mut R>;

fn drop<T: Scalar, R: Rng>(tape: &mut Tape<T>, x: Var, rate: f64, rng: &mut DropoutRng<'_, R>) -> Var {
    match rng {
        Some(r) => tape.dropout(x, rate, &mut **r),
        None => x,
    }
}

fn embed<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layout: &TransformerLayout,
    cfg: &TransformerConfig,
    batch: &PaddedBatch,
    langs: &[usize],
    rng: &mut DropoutRng<'_, R>,
) -> Var {
    let table = tape.param(store, layout.emb.tokens);
    let tok = tape.embedding(table, &batch.ids);
    let pos_table = tape.param(store, layout.emb.positions);
    let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.len).collect();
    let pos = tape.embedding(pos_table, &positions);
    let lang_table = tape.param(store, layout.emb.langs);
    let lang_ids: Vec<usize> = langs.iter().flat_map(|&l| std::iter::repeat_n(l, batch.len)).collect();
    let lang = tape.embedding(lang_table, &lang_ids);
    let x = tape.add(tok, pos);
    let x = tape.add(x, lang);
    let x = layer_norm(tape, store, layout.emb.norm, x);
    drop(tape, x, cfg.dropout, rng)
}

fn ffn_block<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &TransformerConfig,
    lin1: LinearIds,
    lin2: LinearIds,
    x: Var,
    rng: &mut DropoutRng<'_, R>,
) -> Var {
    let h = linear(tape, store, lin1, x);
    let h = tape.gelu(h);
    let h = drop(tape, h, cfg.dropout, rng);
    linear(tape, store, lin2, h)
}

/// Encoder hidden states `[batch*len, d]`. Padded keys get zero attention.
pub fn encoder_forward<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layout: &TransformerLayout,
    cfg: &TransformerConfig,
    batch: &PaddedBatch,
    langs: &[usize],
    mut rng: DropoutRng<'_, R>,
) -> Result<Var> {
    check_batch(cfg, batch, langs)?;
    let padding = batch.padding();
    let mut x = embed(tape, store, layout, cfg, batch, langs, &mut rng);
    for l in &layout.encoder {
        let spec = AttentionSpec {
            batch: batch.batch,
            q_len: batch.len,
            k_len: batch.len,
            heads: cfg.heads,
            key_padding: padding.clone(),
            causal: false,
        };
        let a = attention_block(tape, store, l.attn, x, x, spec);
        let a = drop(tape, a, cfg.dropout, &mut rng);
        let s = tape.add(x, a);
        x = layer_norm(tape, store, l.ln1, s);
        let f = ffn_block(tape, store, cfg, l.ffn1, l.ffn2, x, &mut rng);
        let f = drop(tape, f, cfg.dropout, &mut rng);
        let s = tape.add(x, f);
        x = layer_norm(tape, store, l.ln2, s);
    }
    Ok(x)
}

/// Decoder hidden states `[batch*len, d]`: causal self-attention, then
/// cross-attention onto `enc` (`[batch*src_len, d]`) masked by `src_padding`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layout: &TransformerLayout,
    cfg: &TransformerConfig,
    tgt: &PaddedBatch,
    langs: &[usize],
    enc: Var,
    src_padding: &[bool],
    mut rng: DropoutRng<'_, R>,
) -> Result<Var> {
    check_batch(cfg, tgt, langs)?;
    if layout.decoder.is_empty() {
        return Err(Error::invalid("model has no decoder layers"));
    }
    if tgt.batch == 0 || src_padding.len() % tgt.batch != 0 {
        return Err(Error::invalid("source padding does not match target batch"));
    }
    let src_len = src_padding.len() / tgt.batch;
    let padding = tgt.padding();
    let mut x = embed(tape, store, layout, cfg, tgt, langs, &mut rng);
    for l in &layout.decoder {
        let self_spec = AttentionSpec {
            batch: tgt.batch,
            q_len: tgt.len,
            k_len: tgt.len,
            heads: cfg.heads,
            key_padding: padding.clone(),
            causal: true,
        };
        let a = attention_block(tape, store, l.attn, x, x, self_spec);
        let a = drop(tape, a, cfg.dropout, &mut rng);
        let s = tape.add(x, a);
        x = layer_norm(tape, store, l.ln1, s);
        let cross_spec = AttentionSpec {
            batch: tgt.batch,
            q_len: tgt.len,
            k_len: src_len,
            heads: cfg.heads,
            key_padding: src_padding.to_vec(),
            causal: false,
        };
        let c = attention_block(tape, store, l.cross, x, enc, cross_spec);
        let c = drop(tape, c, cfg.dropout, &mut rng);
        let s = tape.add(x, c);
        x = layer_norm(tape, store, l.ln_cross, s);
        let f = ffn_block(tape, store, cfg, l.ffn1, l.ffn2, x, &mut rng);
        let f = drop(tape, f, cfg.dropout, &mut rng);
        let s = tape.add(x, f);
        x = layer_norm(tape, store, l.ln2, s);
    }
    Ok(x)
}

/// Vocabulary logits through the tied token table: `h · Eᵀ + b`.
pub fn output_logits<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, layout: &TransformerLayout, hidden: Var) -> Var {
    let table = tape.param(store, layout.emb.tokens);
    let bias = tape.param(store, layout.emb.pred_bias);
    let logits = tape.matmul_bt(hidden, table);
    tape.add_bias(logits, bias)
}
