//! Experiments: each chains data preparation, BPE, optional embedding
//! training and mapping, MLM pretraining, UNMT and evaluation, writing every
//! artifact plus a hashed manifest under one output directory.

mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

pub use manifest::{Artifact, ExperimentManifest, StageRecord};

use crate::cipher::{Cipher, CipherSpec};
use crate::config::{KeyValues, KvConfig, Reader};
use crate::corpus::{
    build_vocab, detokenize, filter_long, learn_bpe, tokenize, BpeModel, Corpus, Vocabulary, STANDARD_SPECIALS,
};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::{bleu, bli_precision, chrf, word_matrix, BleuReport, BliMethod, BliReport};
use crate::mlm::{extend_vocab, train_mlm, ExtendInit, InitMode, MlmMetrics, MlmModel, MlmTrainConfig, StreamSchedule};
use crate::neural::{save_checkpoint, AdamConfig, TransformerConfig};
use crate::sgns::{train_sgns, SgnsConfig};
use crate::unmt::{init_unmt_from_mlm, train_unmt, translate, DecodeConfig, UnmtMetrics, UnmtTrainConfig, ValidationSet};
use crate::vecmap::{align_to_model_space, concat_mapped, seed_identical, self_learn, BilingualDictionary, MapConfig, Provenance};

/// Set to anything but `0` or empty to record zero wall-clock times, making
/// manifests byte-identical across reruns.
pub const DETERMINISTIC_ENV: &str = "LEXALIGN_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    XlmBaseline,
    LexicallyAlignedXlm,
    RelmBaseline,
    LexicallyAlignedRelm,
    FrozenAblation,
    JointEmbeddingAblation,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::XlmBaseline,
        Experiment::LexicallyAlignedXlm,
        Experiment::RelmBaseline,
        Experiment::LexicallyAlignedRelm,
        Experiment::FrozenAblation,
        Experiment::JointEmbeddingAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::XlmBaseline => "xlm-baseline",
            Experiment::LexicallyAlignedXlm => "lexically-aligned-xlm",
            Experiment::RelmBaseline => "relm-baseline",
            Experiment::LexicallyAlignedRelm => "lexically-aligned-relm",
            Experiment::FrozenAblation => "frozen-ablation",
            Experiment::JointEmbeddingAblation => "joint-embedding-ablation",
        }
    }

    pub fn stages(self) -> Vec<Stage> {
        use Stage::*;
        let head = [Data, Bpe];
        let tail = [MlmTrain, EvalBli, UnmtTrain, Evaluate];
        let middle: &[Stage] = match self {
            Experiment::XlmBaseline => &[],
            Experiment::LexicallyAlignedXlm | Experiment::FrozenAblation => &[EmbTrain, Map],
            Experiment::JointEmbeddingAblation => &[EmbTrain],
            Experiment::RelmBaseline => &[MlmPretrain, VocabExtend],
            Experiment::LexicallyAlignedRelm => &[MlmPretrain, EmbTrain, Map, VocabExtend],
        };
        head.iter().chain(middle).chain(&tail).copied().collect()
    }

    fn is_relm(self) -> bool {
        matches!(self, Experiment::RelmBaseline | Experiment::LexicallyAlignedRelm)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Experiment::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
            format!("unknown experiment {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Data,
    Bpe,
    EmbTrain,
    Map,
    MlmPretrain,
    VocabExtend,
    MlmTrain,
    EvalBli,
    UnmtTrain,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Bpe => "bpe",
            Stage::EmbTrain => "emb-train",
            Stage::Map => "map",
            Stage::MlmPretrain => "mlm-pretrain",
            Stage::VocabExtend => "vocab-extend",
            Stage::MlmTrain => "mlm-train",
            Stage::EvalBli => "eval-bli",
            Stage::UnmtTrain => "unmt-train",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Parallel valid/test files and optional gold lexicon for user data.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataFiles {
    pub l1_train: PathBuf,
    pub l2_train: PathBuf,
    pub l1_valid: PathBuf,
    pub l2_valid: PathBuf,
    pub l1_test: PathBuf,
    pub l2_test: PathBuf,
    pub gold: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Cipher { spec: CipherSpec, valid_sentences: usize, test_sentences: usize },
    Files(DataFiles),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Cipher { spec: CipherSpec::default(), valid_sentences: 200, test_sentences: 300 }
    }
}

impl KvConfig for DataSource {
    fn read_from(&mut self, r: &mut Reader) {
        let source = r.string("source").unwrap_or_else(|| "cipher".into());
        match source.as_str() {
            "cipher" => {
                let (mut spec, mut valid, mut test) = match self {
                    DataSource::Cipher { spec, valid_sentences, test_sentences } => (spec.clone(), *valid_sentences, *test_sentences),
                    DataSource::Files(_) => (CipherSpec::default(), 200, 300),
                };
                r.nested("cipher", &mut spec);
                r.field("valid_sentences", &mut valid);
                r.field("test_sentences", &mut test);
                *self = DataSource::Cipher { spec, valid_sentences: valid, test_sentences: test };
            }
            "files" => {
                let mut f = DataFiles::default();
                let path = |r: &mut Reader, key: &str| match r.string(key) {
                    Some(p) => PathBuf::from(p),
                    None => {
                        r.error(format!("files source requires {key}"));
                        PathBuf::new()
                    }
                };
                f.l1_train = path(r, "l1_train");
                f.l2_train = path(r, "l2_train");
                f.l1_valid = path(r, "l1_valid");
                f.l2_valid = path(r, "l2_valid");
                f.l1_test = path(r, "l1_test");
                f.l2_test = path(r, "l2_test");
                f.gold = r.string("gold").map(PathBuf::from);
                *self = DataSource::Files(f);
            }
            other => r.error(format!("source: expected cipher or files, got {other:?}")),
        }
    }

    fn write_to(&self, kv: &mut KeyValues, prefix: &str) {
        match self {
            DataSource::Cipher { spec, valid_sentences, test_sentences } => {
                kv.set(format!("{prefix}source"), "cipher");
                spec.write_to(kv, &format!("{prefix}cipher."));
                kv.set(format!("{prefix}valid_sentences"), valid_sentences);
                kv.set(format!("{prefix}test_sentences"), test_sentences);
            }
            DataSource::Files(f) => {
                kv.set(format!("{prefix}source"), "files");
                for (k, p) in [
                    ("l1_train", &f.l1_train),
                    ("l2_train", &f.l2_train),
                    ("l1_valid", &f.l1_valid),
                    ("l2_valid", &f.l2_valid),
                    ("l1_test", &f.l1_test),
                    ("l2_test", &f.l2_test),
                ] {
                    kv.set(format!("{prefix}{k}"), p.display());
                }
                if let Some(g) = &f.gold {
                    kv.set(format!("{prefix}gold"), g.display());
                }
            }
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            DataSource::Cipher { spec, valid_sentences, test_sentences } => {
                spec.validate()?;
                if *valid_sentences == 0 || *test_sentences == 0 {
                    return Err(Error::Config(vec!["valid_sentences and test_sentences must be >= 1".into()]));
                }
                Ok(())
            }
            DataSource::Files(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpeStageConfig {
    pub merges: usize,
    /// Minimum count for a subword to enter the model vocabulary.
    pub min_count: u64,
    /// Training sentences longer than this many subwords are dropped.
    /// Validation and test data are never filtered.
    pub max_len: usize,
}

impl Default for BpeStageConfig {
    fn default() -> Self {
        BpeStageConfig { merges: 20_000, min_count: 1, max_len: 100 }
    }
}

impl KvConfig for BpeStageConfig {
    fn read_from(&mut self, r: &mut Reader) {
        r.field("merges", &mut self.merges);
        r.field("min_count", &mut self.min_count);
        r.field("max_len", &mut self.max_len);
    }

    fn write_to(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(format!("{prefix}merges"), self.merges);
        kv.set(format!("{prefix}min_count"), self.min_count);
        kv.set(format!("{prefix}max_len"), self.max_len);
    }

    fn check(&self) -> Result<()> {
        if self.max_len == 0 || self.min_count == 0 {
            return Err(Error::Config(vec!["max_len and min_count must be >= 1".into()]));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub bli_k: usize,
    pub csls_k: usize,
    pub chrf_order: usize,
    pub chrf_beta: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bli_k: 5, csls_k: 10, chrf_order: 6, chrf_beta: 1.0 }
    }
}

impl KvConfig for EvalConfig {
    fn read_from(&mut self, r: &mut Reader) {
        r.field("bli_k", &mut self.bli_k);
        r.field("csls_k", &mut self.csls_k);
        r.field("chrf_order", &mut self.chrf_order);
        r.field("chrf_beta", &mut self.chrf_beta);
    }

    fn write_to(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(format!("{prefix}bli_k"), self.bli_k);
        kv.set(format!("{prefix}csls_k"), self.csls_k);
        kv.set(format!("{prefix}chrf_order"), self.chrf_order);
        kv.set(format!("{prefix}chrf_beta"), self.chrf_beta);
    }

    fn check(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.bli_k == 0 || self.csls_k == 0 || self.chrf_order == 0 {
            errs.push("bli_k, csls_k and chrf_order must be >= 1".to_string());
        }
        if !(self.chrf_beta > 0.0) {
            errs.push("chrf_beta must be > 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Everything an experiment run needs. Stage seeds are derived from
/// `seed` by [`PipelineConfig::with_seed`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub data: DataSource,
    pub bpe: BpeStageConfig,
    pub sgns: SgnsConfig,
    pub map: MapConfig,
    /// `vocab_size` is filled in from the data.
    pub model: TransformerConfig,
    /// Monolingual first step of the RE-LM variants.
    pub pretrain: MlmTrainConfig,
    pub mlm: MlmTrainConfig,
    pub unmt: UnmtTrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

/// Stage names of the per-stage config files an experiment file may
/// reference, in manifest order.
pub const STAGE_CONFIG_KEYS: [&str; 10] = ["data", "bpe", "sgns", "map", "model", "pretrain", "mlm", "unmt", "decode", "eval"];

impl PipelineConfig {
    /// Desk-scale settings for the synthetic cipher pair.
    pub fn desk_scale(experiment: Experiment) -> Self {
        let adam = AdamConfig { lr: 1e-3, warmup_steps: 100, ..Default::default() };
        PipelineConfig {
            experiment,
            seed: 1,
            data: DataSource::default(),
            bpe: BpeStageConfig::default(),
            sgns: SgnsConfig { epochs: 15, ..Default::default() },
            map: MapConfig::default(),
            model: TransformerConfig::default(),
            pretrain: MlmTrainConfig {
                steps: 1000,
                eval_every: 250,
                schedule: StreamSchedule { weights: vec![1.0, 0.0] },
                adam: adam.clone(),
                ..Default::default()
            },
            mlm: MlmTrainConfig { steps: 1000, eval_every: 250, adam: adam.clone(), ..Default::default() },
            unmt: UnmtTrainConfig { steps: 2000, eval_every: 200, patience: 5, adam, ..Default::default() },
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
        .with_seed(1)
    }

    /// A seconds-long configuration that exercises every stage; useful for
    /// smoke tests, not for measuring quality.
    pub fn smoke_scale(experiment: Experiment) -> Self {
        let mut c = PipelineConfig::desk_scale(experiment);
        c.data = DataSource::Cipher {
            spec: CipherSpec { vocab_size: 80, sentences: 800, max_len: 8, ..Default::default() },
            valid_sentences: 8,
            test_sentences: 8,
        };
        c.bpe.max_len = 20;
        c.model = TransformerConfig { layers: 1, model_dim: 16, heads: 2, ffn_dim: 32, max_positions: 24, ..c.model };
        c.sgns = SgnsConfig { dim: 16, epochs: 2, ..c.sgns };
        c.map.max_iterations = 5;
        for m in [&mut c.pretrain, &mut c.mlm] {
            m.steps = 6;
            m.batch_size = 8;
            m.eval_every = 3;
        }
        c.unmt.steps = 4;
        c.unmt.batch_size = 4;
        c.unmt.eval_every = 2;
        c.decode.beam_size = 2;
        c.eval.csls_k = 3;
        let seed = c.seed;
        c.with_seed(seed)
    }

    /// Sets `seed` and derives every stage seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let derive = |salt: u64| seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt);
        self.seed = seed;
        self.sgns.seed = derive(1);
        self.map.seed = derive(3);
        self.pretrain.seed = derive(4);
        self.mlm.seed = derive(5);
        self.unmt.seed = derive(6);
        self
    }

    fn stage_kv(&self, key: &str) -> KeyValues {
        match key {
            "data" => self.data.to_kv(),
            "bpe" => self.bpe.to_kv(),
            "sgns" => self.sgns.to_kv(),
            "map" => self.map.to_kv(),
            "model" => self.model.to_kv(),
            "pretrain" => self.pretrain.to_kv(),
            "mlm" => self.mlm.to_kv(),
            "unmt" => self.unmt.to_kv(),
            "decode" => self.decode.to_kv(),
            "eval" => self.eval.to_kv(),
            _ => unreachable!("unknown stage key {key}"),
        }
    }

    /// Cross-stage checks that no single stage config can see.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, r) in [
            ("data", self.data.check()),
            ("bpe", self.bpe.check()),
            ("sgns", self.sgns.check()),
            ("map", self.map.check()),
            ("model", TransformerConfig { vocab_size: self.model.vocab_size.max(1), ..self.model.clone() }.validate()),
            ("pretrain", self.pretrain.check()),
            ("mlm", self.mlm.check()),
            ("unmt", self.unmt.check()),
            ("decode", self.decode.check()),
            ("eval", self.eval.check()),
        ] {
            collect(&mut errs, name, r);
        }
        let uses_sgns = self.experiment.stages().contains(&Stage::EmbTrain);
        if uses_sgns && self.sgns.dim != self.model.model_dim {
            errs.push(format!("sgns: dim {} must equal model.model_dim {}", self.sgns.dim, self.model.model_dim));
        }
        if self.bpe.max_len + 2 > self.model.max_positions {
            errs.push(format!(
                "bpe: max_len {} plus sentence markers exceeds model.max_positions {}",
                self.bpe.max_len, self.model.max_positions
            ));
        }
        if self.model.n_langs != 2 {
            errs.push("model: n_langs must be 2".into());
        }
        if self.mlm.schedule.weights.len() != 2 || self.pretrain.schedule.weights.len() != 2 {
            errs.push("mlm/pretrain: schedule needs one weight per language".into());
        }
        if self.experiment.is_relm() && self.pretrain.schedule.weights.get(1).is_some_and(|&w| w != 0.0) {
            errs.push("pretrain: the monolingual step must give the second language weight 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Reads an experiment file: `experiment`, `seed`, and one optional
    /// path per stage config (relative to the file's directory). Missing
    /// stage files keep the desk-scale defaults. Every problem across all
    /// files is reported together.
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_experiment_kv(&kv, dir, None)
    }

    /// Like [`Self::load`] but with the experiment chosen by the caller
    /// when the file does not name one.
    pub fn from_experiment_kv(kv: &KeyValues, dir: &Path, experiment: Option<Experiment>) -> Result<Self> {
        let mut errs = Vec::new();
        let mut r = Reader::new(kv);
        let exp = match (r.string("experiment"), experiment) {
            (_, Some(e)) => e,
            (Some(name), None) => name.parse().unwrap_or_else(|e: String| {
                errs.push(e);
                Experiment::XlmBaseline
            }),
            (None, None) => {
                errs.push("experiment is required".into());
                Experiment::XlmBaseline
            }
        };
        let mut seed = 1u64;
        r.field("seed", &mut seed);
        let mut cfg = PipelineConfig::desk_scale(exp).with_seed(seed);
        let mut files = Vec::new();
        for key in STAGE_CONFIG_KEYS {
            if let Some(p) = r.string(key) {
                files.push((key, dir.join(p)));
            }
        }
        errs.extend(r.finish());
        for (key, file) in files {
            let stage_kv = match KeyValues::load(&file) {
                Ok(k) => k,
                Err(e) => {
                    errs.push(format!("{key}: {e}"));
                    continue;
                }
            };
            let res = match key {
                "data" => overlay(&mut cfg.data, &stage_kv),
                "bpe" => overlay(&mut cfg.bpe, &stage_kv),
                "sgns" => overlay(&mut cfg.sgns, &stage_kv),
                "map" => overlay(&mut cfg.map, &stage_kv),
                "model" => overlay(&mut cfg.model, &stage_kv),
                "pretrain" => overlay(&mut cfg.pretrain, &stage_kv),
                "mlm" => overlay(&mut cfg.mlm, &stage_kv),
                "unmt" => overlay(&mut cfg.unmt, &stage_kv),
                "decode" => overlay(&mut cfg.decode, &stage_kv),
                "eval" => overlay(&mut cfg.eval, &stage_kv),
                _ => unreachable!(),
            };
            errs.extend(res.into_iter().map(|e| format!("{key}: {e}")));
        }
        if let Err(Error::Config(es)) = cfg.validate() {
            errs.extend(es);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            errs.dedup();
            Err(Error::Config(errs))
        }
    }
}

fn collect(errs: &mut Vec<String>, name: &str, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::Config(es)) => errs.extend(es.into_iter().map(|e| format!("{name}: {e}"))),
        Err(e) => errs.push(format!("{name}: {e}")),
    }
}

/// Overlays `kv` onto `cfg`; returns read errors (validation happens later).
fn overlay<C: KvConfig>(cfg: &mut C, kv: &KeyValues) -> Vec<String> {
    let mut r = Reader::new(kv);
    cfg.read_from(&mut r);
    r.finish()
}

/// Scores of one translation direction on the test set.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionScores {
    pub src_lang: usize,
    pub tgt_lang: usize,
    pub bleu: BleuReport,
    pub chrf: f64,
}

impl DirectionScores {
    /// Corpus 1-gram precision in percent.
    pub fn unigram_precision(&self) -> f64 {
        100.0 * self.bleu.precisions[0]
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: ExperimentManifest,
    /// BLI of the mapped SGNS spaces, when a map stage ran.
    pub mapping_bli: Option<BliReport>,
    /// BLI of the trained MLM's embedding layer (NN then CSLS), when gold exists.
    pub mlm_bli: Vec<BliReport>,
    pub mlm_metrics: MlmMetrics,
    pub unmt_metrics: UnmtMetrics,
    pub directions: Vec<DirectionScores>,
}

impl PipelineOutcome {
    pub fn results_tsv(&self) -> String {
        let mut s = String::from("metric\tdirection\tvalue\n");
        for r in &self.mlm_bli {
            s.push_str(&format!("mlm_bli_p@{}_{}\t-\t{:.6}\n", r.k, r.method, r.precision));
        }
        for d in &self.directions {
            let dir = format!("l{}-l{}", d.src_lang + 1, d.tgt_lang + 1);
            s.push_str(&format!("bleu\t{dir}\t{:.4}\n", d.bleu.bleu));
            s.push_str(&format!("chrf\t{dir}\t{:.4}\n", d.chrf));
            s.push_str(&format!("unigram_precision\t{dir}\t{:.4}\n", d.unigram_precision()));
        }
        s
    }

    pub fn best_bleu(&self) -> f64 {
        self.directions.iter().map(|d| d.bleu.bleu).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Raw (word-level) data of a run.
struct Data {
    train: [Corpus; 2],
    valid: [Corpus; 2],
    test: [Corpus; 2],
    gold: Option<BilingualDictionary>,
}

struct Runner<'a> {
    out: &'a Path,
    manifest: ExperimentManifest,
}

impl Runner<'_> {
    /// Runs `f` as stage `stage`, wrapping its errors with the stage name
    /// and recording its outputs (paths relative to the output directory).
    fn stage<R>(
        &mut self,
        stage: Stage,
        config: &KeyValues,
        seed: u64,
        inputs: Vec<PathBuf>,
        f: impl FnOnce(&Path) -> Result<(R, Vec<&'static str>)>,
    ) -> Result<R> {
        let t = Instant::now();
        let wrap = |e: Error| Error::Stage { stage: stage.name(), source: Box::new(e) };
        let (r, outputs) = f(self.out).map_err(wrap)?;
        let outputs = outputs.into_iter().map(|p| Artifact::hash(self.out, p)).collect::<Result<Vec<_>>>().map_err(wrap)?;
        let seconds = if self.manifest.deterministic { 0.0 } else { (t.elapsed().as_secs_f64() * 1e3).round() / 1e3 };
        self.manifest.stages.push(StageRecord {
            stage: stage.name().to_string(),
            config_hash: config.hash(),
            seed,
            inputs,
            outputs,
            seconds,
        });
        Ok(r)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads two parallel files and keeps the line pairs where both sides are
/// non-empty after tokenization.
pub fn read_parallel(a: &Path, b: &Path) -> Result<[Corpus; 2]> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let (ta, tb) = (read(a)?, read(b)?);
    let (la, lb): (Vec<&str>, Vec<&str>) = (ta.lines().collect(), tb.lines().collect());
    if la.len() != lb.len() {
        return Err(Error::invalid(format!("{} has {} lines but {} has {}", a.display(), la.len(), b.display(), lb.len())));
    }
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    for (x, y) in la.iter().zip(&lb) {
        let (tx, ty) = (tokenize(x), tokenize(y));
        if !tx.is_empty() && !ty.is_empty() {
            sa.push(tx);
            sb.push(ty);
        }
    }
    Ok([Corpus::new("l1", sa), Corpus::new("l2", sb)])
}

/// Detokenized sentences, as references for BLEU and chrF.
pub fn references(c: &Corpus) -> Vec<String> {
    c.sentences.iter().map(|s| detokenize(s)).collect()
}

fn distinct_words(c: &Corpus) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    c.sentences.iter().flatten().filter(|w| seen.insert(w.as_str())).cloned().collect()
}

/// The rows of `emb` for its non-special tokens, as the target space for
/// aligning new embeddings to a trained model.
pub fn regular_rows(emb: &EmbeddingMatrix<f32>) -> Result<EmbeddingMatrix<f32>> {
    let v = emb.vocab();
    let tokens: Vec<String> = v.regular_ids().map(|i| v.token(i).to_string()).collect();
    Ok(word_matrix(&tokens, None, emb)?.0)
}

/// Runs the configured experiment, writing artifacts under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let exp = cfg.experiment;
    let plan = exp.stages();
    let mut run = Runner {
        out,
        manifest: ExperimentManifest {
            experiment: exp.name().to_string(),
            seed: cfg.seed,
            deterministic: deterministic_mode(),
            stages: Vec::new(),
        },
    };

    // data
    let data_inputs = match &cfg.data {
        DataSource::Cipher { .. } => Vec::new(),
        DataSource::Files(f) => {
            let mut v = vec![f.l1_train.clone(), f.l2_train.clone(), f.l1_valid.clone(), f.l2_valid.clone(), f.l1_test.clone(), f.l2_test.clone()];
            v.extend(f.gold.clone());
            v
        }
    };
    let data: Data = run.stage(Stage::Data, &cfg.stage_kv("data"), 0, data_inputs, |out| match &cfg.data {
        DataSource::Cipher { spec, valid_sentences, test_sentences } => {
            let c = Cipher::new(spec)?;
            let (a, b) = c.monolingual();
            let (va, vb) = c.parallel(*valid_sentences, 1);
            let (ta, tb) = c.parallel(*test_sentences, 2);
            let gold = c.gold();
            let files = ["l1.train", "l2.train", "l1.valid", "l2.valid", "l1.test", "l2.test"];
            for (name, corpus) in files.iter().zip([&a, &b, &va, &vb, &ta, &tb]) {
                corpus.write(&out.join(name))?;
            }
            gold.save(&out.join("gold.dict"))?;
            let data = Data { train: [a, b], valid: [va, vb], test: [ta, tb], gold: Some(gold) };
            Ok((data, files.into_iter().chain(["gold.dict"]).collect()))
        }
        DataSource::Files(f) => {
            let train = [Corpus::read_raw(&f.l1_train, "l1")?, Corpus::read_raw(&f.l2_train, "l2")?];
            if train.iter().any(Corpus::is_empty) {
                return Err(Error::EmptyCorpus);
            }
            let valid = read_parallel(&f.l1_valid, &f.l2_valid)?;
            let test = read_parallel(&f.l1_test, &f.l2_test)?;
            let gold = f.gold.as_deref().map(|p| BilingualDictionary::load(p, Provenance::Gold)).transpose()?;
            Ok((Data { train, valid, test, gold }, Vec::new()))
        }
    })?;

    // bpe + vocabulary
    struct Prepared {
        bpe: BpeModel,
        train: [Corpus; 2],
        valid: [Corpus; 2],
        test: [Corpus; 2],
        joint: Vocabulary,
        l1_vocab: Vocabulary,
    }
    let prep: Prepared = run.stage(Stage::Bpe, &cfg.stage_kv("bpe"), 0, Vec::new(), |out| {
        let joint_corpus = Corpus::concat("joint", &[&data.train[0], &data.train[1]]);
        let bpe = learn_bpe(&joint_corpus, cfg.bpe.merges)?;
        let split = |c: &Corpus| bpe.apply_corpus(c);
        let train = [filter_long(&split(&data.train[0]), cfg.bpe.max_len)?, filter_long(&split(&data.train[1]), cfg.bpe.max_len)?];
        if train.iter().any(Corpus::is_empty) {
            return Err(Error::EmptyCorpus);
        }
        let valid = [split(&data.valid[0]), split(&data.valid[1])];
        let test = [split(&data.test[0]), split(&data.test[1])];
        let joint = build_vocab(&Corpus::concat("joint", &[&train[0], &train[1]]), cfg.bpe.min_count, &STANDARD_SPECIALS)?;
        let l1_vocab = build_vocab(&train[0], cfg.bpe.min_count, &STANDARD_SPECIALS)?;
        bpe.save(&out.join("bpe.codes"))?;
        train[0].write(&out.join("l1.train.bpe"))?;
        train[1].write(&out.join("l2.train.bpe"))?;
        joint.save(&out.join("vocab.txt"))?;
        let mut outputs = vec!["bpe.codes", "l1.train.bpe", "l2.train.bpe", "vocab.txt"];
        if exp.is_relm() {
            l1_vocab.save(&out.join("vocab.l1.txt"))?;
            outputs.push("vocab.l1.txt");
        }
        Ok((Prepared { bpe, train, valid, test, joint, l1_vocab }, outputs))
    })?;
    let model_cfg = |vocab: &Vocabulary| TransformerConfig { vocab_size: vocab.len(), ..cfg.model.clone() };

    // RE-LM monolingual pretraining
    let pretrained: Option<MlmModel<f32>> = if plan.contains(&Stage::MlmPretrain) {
        let inputs = vec!["l1.train.bpe".into(), "vocab.l1.txt".into()];
        Some(run.stage(Stage::MlmPretrain, &cfg.stage_kv("pretrain"), cfg.pretrain.seed, inputs, |out| {
            let tc = model_cfg(&prep.l1_vocab);
            let mut m = MlmModel::<f32>::init(&tc, prep.l1_vocab.clone(), &InitMode::Random, cfg.pretrain.seed ^ 0x1111)?;
            let metrics = train_mlm(&mut m, &[&prep.train[0], &prep.train[1]], &[&prep.valid[0]], &cfg.pretrain)?;
            save_checkpoint(&m.checkpoint(), &out.join("mlm_pretrain.ckpt"))?;
            write(&out.join("mlm_pretrain_metrics.tsv"), &metrics.to_tsv())?;
            Ok((m, vec!["mlm_pretrain.ckpt", "mlm_pretrain_metrics.tsv"]))
        })?)
    } else {
        None
    };

    // embeddings
    let embeddings: Option<Vec<EmbeddingMatrix<f32>>> = if plan.contains(&Stage::EmbTrain) {
        let inputs = vec!["l1.train.bpe".into(), "l2.train.bpe".into()];
        Some(run.stage(Stage::EmbTrain, &cfg.stage_kv("sgns"), cfg.sgns.seed, inputs, |out| {
            let second = SgnsConfig { seed: cfg.sgns.seed.wrapping_add(1), ..cfg.sgns.clone() };
            match exp {
                Experiment::JointEmbeddingAblation => {
                    let joint = Corpus::concat("joint", &[&prep.train[0], &prep.train[1]]);
                    let e = train_sgns::<f32>(&joint, &cfg.sgns)?;
                    e.write_word2vec(&out.join("emb.joint.vec"))?;
                    Ok((vec![e], vec!["emb.joint.vec"]))
                }
                Experiment::LexicallyAlignedRelm => {
                    let e = train_sgns::<f32>(&prep.train[1], &second)?;
                    e.write_word2vec(&out.join("emb.l2.vec"))?;
                    Ok((vec![e], vec!["emb.l2.vec"]))
                }
                _ => {
                    let a = train_sgns::<f32>(&prep.train[0], &cfg.sgns)?;
                    let b = train_sgns::<f32>(&prep.train[1], &second)?;
                    a.write_word2vec(&out.join("emb.l1.vec"))?;
                    b.write_word2vec(&out.join("emb.l2.vec"))?;
                    Ok((vec![a, b], vec!["emb.l1.vec", "emb.l2.vec"]))
                }
            }
        })?)
    } else {
        None
    };

    // mapping
    let mut mapping_bli = None;
    let mapped: Option<EmbeddingMatrix<f32>> = if plan.contains(&Stage::Map) {
        let embs = embeddings.as_ref().expect("emb-train precedes map");
        let inputs = if exp.is_relm() { vec!["emb.l2.vec".into(), "mlm_pretrain.ckpt".into()] } else { vec!["emb.l1.vec".into(), "emb.l2.vec".into()] };
        Some(run.stage(Stage::Map, &cfg.stage_kv("map"), cfg.map.seed, inputs, |out| {
            if exp.is_relm() {
                let model_space = regular_rows(&pretrained.as_ref().expect("pretrain precedes map").embedding_matrix())?;
                let m = align_to_model_space(&embs[0], &model_space, &cfg.map)?;
                m.write_word2vec(&out.join("emb.l2.mapped.vec"))?;
                Ok((m, vec!["emb.l2.mapped.vec"]))
            } else {
                let seed = seed_identical(embs[0].vocab(), embs[1].vocab())?;
                let sol = self_learn(&embs[0], &embs[1], &seed, &cfg.map)?;
                let (xs, zs) = (sol.map_source(&embs[0])?, sol.map_target(&embs[1])?);
                if let Some(gold) = &data.gold {
                    let src_words: Vec<String> = gold.pairs().iter().map(|p| p.0.clone()).collect();
                    let (s, _) = word_matrix(&src_words, Some(&prep.bpe), &xs)?;
                    let (t, _) = word_matrix(&distinct_words(&data.train[1]), Some(&prep.bpe), &zs)?;
                    mapping_bli = bli_precision(&s, &t, gold, 1, BliMethod::Csls, cfg.eval.csls_k).ok();
                }
                let joint = concat_mapped(&xs, &zs, &prep.joint, cfg.map.seed ^ 0x2222)?;
                joint.write_word2vec(&out.join("emb.mapped.vec"))?;
                write(&out.join("map_report.tsv"), &sol.report())?;
                Ok((joint, vec!["emb.mapped.vec", "map_report.tsv"]))
            }
        })?)
    } else {
        None
    };

    // vocabulary extension (RE-LM)
    let extended: Option<MlmModel<f32>> = if plan.contains(&Stage::VocabExtend) {
        let mut inputs = vec![PathBuf::from("mlm_pretrain.ckpt"), "vocab.txt".into()];
        if mapped.is_some() {
            inputs.push("emb.l2.mapped.vec".into());
        }
        let mut kv = KeyValues::new();
        kv.set("init", if mapped.is_some() { "aligned" } else { "random" });
        Some(run.stage(Stage::VocabExtend, &kv, cfg.mlm.seed ^ 0x3333, inputs, |out| {
            let base = pretrained.as_ref().expect("pretrain precedes extension");
            let init = match &mapped {
                Some(m) => ExtendInit::Aligned(m.clone()),
                None => ExtendInit::Random { seed: cfg.mlm.seed ^ 0x3333 },
            };
            let m = extend_vocab(base, prep.joint.clone(), &init)?;
            save_checkpoint(&m.checkpoint(), &out.join("mlm_extended.ckpt"))?;
            Ok((m, vec!["mlm_extended.ckpt"]))
        })?)
    } else {
        None
    };

    // bilingual MLM
    let mut mlm_inputs = vec![PathBuf::from("l1.train.bpe"), "l2.train.bpe".into(), "vocab.txt".into()];
    mlm_inputs.extend(match exp {
        Experiment::LexicallyAlignedXlm | Experiment::FrozenAblation => Some(PathBuf::from("emb.mapped.vec")),
        Experiment::JointEmbeddingAblation => Some("emb.joint.vec".into()),
        Experiment::RelmBaseline | Experiment::LexicallyAlignedRelm => Some("mlm_extended.ckpt".into()),
        Experiment::XlmBaseline => None,
    });
    let (mlm, mlm_metrics) = run.stage(Stage::MlmTrain, &cfg.stage_kv("mlm"), cfg.mlm.seed, mlm_inputs, |out| {
        let tc = model_cfg(&prep.joint);
        let init_seed = cfg.mlm.seed ^ 0x1111;
        let mut m = match exp {
            Experiment::XlmBaseline => MlmModel::init(&tc, prep.joint.clone(), &InitMode::Random, init_seed)?,
            Experiment::LexicallyAlignedXlm => {
                MlmModel::init(&tc, prep.joint.clone(), &InitMode::AlignedFinetuned(mapped.clone().expect("mapped")), init_seed)?
            }
            Experiment::FrozenAblation => {
                MlmModel::init(&tc, prep.joint.clone(), &InitMode::AlignedFrozen(mapped.clone().expect("mapped")), init_seed)?
            }
            Experiment::JointEmbeddingAblation => {
                let e = &embeddings.as_ref().expect("joint embeddings")[0];
                let table = concat_mapped(e, e, &prep.joint, cfg.mlm.seed ^ 0x2222)?;
                MlmModel::init(&tc, prep.joint.clone(), &InitMode::AlignedFinetuned(table), init_seed)?
            }
            Experiment::RelmBaseline | Experiment::LexicallyAlignedRelm => extended.clone().expect("extended model"),
        };
        save_checkpoint(&m.checkpoint(), &out.join("mlm_init.ckpt"))?;
        let metrics = train_mlm(&mut m, &[&prep.train[0], &prep.train[1]], &[&prep.valid[0], &prep.valid[1]], &cfg.mlm)?;
        save_checkpoint(&m.checkpoint(), &out.join("mlm.ckpt"))?;
        write(&out.join("mlm_metrics.tsv"), &metrics.to_tsv())?;
        Ok(((m, metrics), vec!["mlm_init.ckpt", "mlm.ckpt", "mlm_metrics.tsv"]))
    })?;

    // BLI of the MLM embedding layer
    let mlm_bli = match &data.gold {
        Some(gold) => run.stage(Stage::EvalBli, &cfg.stage_kv("eval"), 0, vec!["mlm.ckpt".into()], |out| {
            let emb = mlm.embedding_matrix();
            let src_words: Vec<String> = gold.pairs().iter().map(|p| p.0.clone()).collect();
            let (s, _) = word_matrix(&src_words, Some(&prep.bpe), &emb)?;
            let (t, _) = word_matrix(&distinct_words(&data.train[1]), Some(&prep.bpe), &emb)?;
            let reports = [BliMethod::Nn, BliMethod::Csls]
                .into_iter()
                .map(|m| bli_precision(&s, &t, gold, cfg.eval.bli_k, m, cfg.eval.csls_k))
                .collect::<Result<Vec<_>>>()?;
            let text: String = reports.iter().map(|r| r.tsv() + "\n").collect();
            write(&out.join("bli.tsv"), &text)?;
            Ok((reports, vec!["bli.tsv"]))
        })?,
        None => Vec::new(),
    };

    // UNMT
    let valid_sets: Vec<ValidationSet> = [(0, 1), (1, 0)]
        .into_iter()
        .map(|(s, t)| ValidationSet {
            src_lang: s,
            tgt_lang: t,
            sources: prep.valid[s].clone(),
            references: references(&data.valid[t]),
        })
        .collect();
    let (s2s, unmt_metrics) = run.stage(Stage::UnmtTrain, &cfg.stage_kv("unmt"), cfg.unmt.seed, vec!["mlm.ckpt".into()], |out| {
        let mut s2s = init_unmt_from_mlm(&mlm, &model_cfg(&prep.joint), cfg.unmt.seed ^ 0x4444)?;
        let metrics = train_unmt(&mut s2s, [&prep.train[0], &prep.train[1]], &valid_sets, &cfg.unmt)?;
        save_checkpoint(&s2s.checkpoint(), &out.join("unmt.ckpt"))?;
        write(&out.join("unmt_metrics.tsv"), &metrics.to_tsv())?;
        Ok(((s2s, metrics), vec!["unmt.ckpt", "unmt_metrics.tsv"]))
    })?;

    // test-set evaluation
    let mut eval_kv = cfg.stage_kv("decode");
    for k in ["chrf_order", "chrf_beta"] {
        eval_kv.set(format!("eval.{k}"), cfg.eval.to_kv().get(k).unwrap_or_default());
    }
    let directions = run.stage(Stage::Evaluate, &eval_kv, 0, vec!["unmt.ckpt".into()], |out| {
        let mut scores = Vec::new();
        let mut outputs = Vec::new();
        for (s, t, name) in [(0, 1, "hyp.l1-l2.txt"), (1, 0, "hyp.l2-l1.txt")] {
            let hyps = translate(&s2s, &prep.test[s], s, t, &cfg.decode)?;
            let refs = references(&data.test[t]);
            write(&out.join(name), &hyps.iter().map(|h| format!("{h}\n")).collect::<String>())?;
            let b = bleu(&hyps, &refs)?;
            let c = chrf(&hyps, &refs, cfg.eval.chrf_order, cfg.eval.chrf_beta)?;
            scores.push(DirectionScores { src_lang: s, tgt_lang: t, bleu: b, chrf: c });
            outputs.push(name);
        }
        Ok((scores, outputs))
    })?;

    let outcome = PipelineOutcome { manifest: run.manifest, mapping_bli, mlm_bli, mlm_metrics, unmt_metrics, directions };
    write(&out.join("results.tsv"), &outcome.results_tsv())?;
    write(&out.join("manifest.txt"), &outcome.manifest.to_text())?;
    outcome.manifest.verify(out)?;
    Ok(outcome)
}
