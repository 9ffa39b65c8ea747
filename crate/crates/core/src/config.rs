//! Flat `key = value` configuration files.
//!
//! One pair per line; `#` starts a comment. Each stage config type maps its
//! fields to keys of the same name, with nested configs under a dotted
//! prefix (`adam.lr`). Reading collects every problem (unknown keys,
//! unparsable values, failed validation) into one [`Error::Config`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cipher::CipherSpec;
use crate::error::{Error, Result};
use crate::mlm::{MaskingPolicy, MlmTrainConfig};
use crate::neural::{AdamConfig, TransformerConfig};
use crate::sgns::SgnsConfig;
use crate::unmt::{DecodeConfig, NoiseConfig, UnmtTrainConfig};
use crate::vecmap::MapConfig;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { what: "config", line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("duplicate key {k:?}")));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse { what: "config", line, msg: format!("{}: {msg}", path.display()) },
            e => e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }

    /// Pairs under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> KeyValues {
        let p = format!("{prefix}.");
        KeyValues {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Typed access to a [`KeyValues`] that records unknown keys and bad values.
pub struct Reader<'a> {
    kv: &'a KeyValues,
    prefix: String,
    used: BTreeSet<String>,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    pub fn new(kv: &'a KeyValues) -> Self {
        Reader { kv, prefix: String::new(), used: BTreeSet::new(), errors: Vec::new() }
    }

    fn full(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    /// Overwrites `slot` if `key` is present.
    pub fn field<T: FromStr>(&mut self, key: &str, slot: &mut T)
    where
        T::Err: Display,
    {
        let full = self.full(key);
        if let Some(v) = self.kv.get(&full) {
            match v.parse() {
                Ok(x) => *slot = x,
                Err(e) => self.errors.push(format!("{full}: {e} (got {v:?})")),
            }
            self.used.insert(full);
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>)
    where
        T::Err: Display,
    {
        let full = self.full(key);
        if let Some(v) = self.kv.get(&full) {
            match v.split(',').map(|x| x.trim().parse()).collect::<Result<Vec<T>, _>>() {
                Ok(xs) => *slot = xs,
                Err(e) => self.errors.push(format!("{full}: {e} (got {v:?})")),
            }
            self.used.insert(full);
        }
    }

    pub fn string(&mut self, key: &str) -> Option<String> {
        let full = self.full(key);
        let v = self.kv.get(&full)?.to_string();
        self.used.insert(full);
        Some(v)
    }

    pub fn nested<C: KvConfig>(&mut self, prefix: &str, cfg: &mut C) {
        let inner = format!("{}{prefix}.", self.prefix);
        let saved = std::mem::replace(&mut self.prefix, inner);
        cfg.read_from(self);
        self.prefix = saved;
    }

    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    /// All errors so far plus one per unread key.
    pub fn finish(self) -> Vec<String> {
        let mut errs = self.errors;
        errs.extend(self.kv.keys().filter(|k| !self.used.contains(*k)).map(|k| format!("unknown key {k:?}")));
        errs
    }
}

/// A stage config readable from and writable to [`KeyValues`].
pub trait KvConfig: Default {
    fn read_from(&mut self, r: &mut Reader);
    fn write_to(&self, kv: &mut KeyValues, prefix: &str);
    fn check(&self) -> Result<()>;

    fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.write_to(&mut kv, "");
        kv
    }

    /// Defaults overlaid with `kv`, then validated. Every problem is reported.
    fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        let mut r = Reader::new(kv);
        cfg.read_from(&mut r);
        let mut errs = r.finish();
        if let Err(e) = cfg.check() {
            match e {
                Error::Config(es) => errs.extend(es),
                e => errs.push(e.to_string()),
            }
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::load(path)?)
    }
}

macro_rules! kv_config {
    ($ty:ty, check = $check:expr, { $($key:ident),* $(,)? } $(, nested { $($nk:ident),* })?) => {
        impl KvConfig for $ty {
            fn read_from(&mut self, r: &mut Reader) {
                $( r.field(stringify!($key), &mut self.$key); )*
                $($( r.nested(stringify!($nk), &mut self.$nk); )*)?
            }

            fn write_to(&self, kv: &mut KeyValues, prefix: &str) {
                $( kv.set(format!("{prefix}{}", stringify!($key)), &self.$key); )*
                $($( self.$nk.write_to(kv, &format!("{prefix}{}.", stringify!($nk))); )*)?
            }

            fn check(&self) -> Result<()> {
                let f: fn(&$ty) -> Result<()> = $check;
                f(self)
            }
        }
    };
}

kv_config!(SgnsConfig, check = |c| c.validate(), { dim, window, negatives, epochs, learning_rate, subsample, min_count, power, seed });
kv_config!(MapConfig, check = |c| c.validate(), {
    csls_k, vocab_cutoff, keep_prob_init, keep_prob_growth, stall_patience, tolerance, max_iterations, seed
});
kv_config!(TransformerConfig, check = |c| c.validate(), {
    layers, model_dim, heads, ffn_dim, dropout, max_positions, vocab_size, n_langs
});
kv_config!(AdamConfig, check = |c| c.validate(), { lr, beta1, beta2, eps, warmup_steps, clip_norm });
kv_config!(MaskingPolicy, check = |c| c.validate(), { mask_rate, mask_share, random_share, keep_share });
kv_config!(NoiseConfig, check = |c| c.validate(), { drop_prob, blank_prob, shuffle_window });
kv_config!(DecodeConfig, check = |c| c.validate(), { beam_size, max_len_factor, max_len_offset, length_penalty });
kv_config!(UnmtTrainConfig, check = |c| c.validate(), { steps, batch_size, eval_every, patience, seed }, nested { noise, adam });
kv_config!(CipherSpec, check = |c| c.validate(), {
    vocab_size, sentences, min_len, max_len, anchor_fraction, zipf_exponent, successors, follow_prob, seed
});

impl KvConfig for MlmTrainConfig {
    fn read_from(&mut self, r: &mut Reader) {
        r.field("steps", &mut self.steps);
        r.field("batch_size", &mut self.batch_size);
        r.field("eval_every", &mut self.eval_every);
        r.field("seed", &mut self.seed);
        r.list("schedule", &mut self.schedule.weights);
        r.nested("policy", &mut self.policy);
        r.nested("adam", &mut self.adam);
    }

    fn write_to(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(format!("{prefix}steps"), self.steps);
        kv.set(format!("{prefix}batch_size"), self.batch_size);
        kv.set(format!("{prefix}eval_every"), self.eval_every);
        kv.set(format!("{prefix}seed"), self.seed);
        let w: Vec<String> = self.schedule.weights.iter().map(f64::to_string).collect();
        kv.set(format!("{prefix}schedule"), w.join(","));
        self.policy.write_to(kv, &format!("{prefix}policy."));
        self.adam.write_to(kv, &format!("{prefix}adam."));
    }

    fn check(&self) -> Result<()> {
        self.validate(self.schedule.weights.len())
    }
}
