use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lexalign::cipher::{Cipher, CipherSpec};
use lexalign::config::{KeyValues, KvConfig};
use lexalign::corpus::{build_vocab, filter_long, learn_bpe, BpeModel, Corpus, Vocabulary, STANDARD_SPECIALS};
use lexalign::eval::{bleu, bli_precision, chrf, word_matrix, BliMethod};
use lexalign::mlm::{extend_vocab, train_mlm, ExtendInit, InitMode, MlmModel, MlmTrainConfig};
use lexalign::neural::{load_checkpoint, save_checkpoint, TransformerConfig};
use lexalign::pipeline::{
    deterministic_mode, read_parallel, references, regular_rows, run_pipeline, Artifact, PipelineConfig, StageRecord,
};
use lexalign::sgns::{train_sgns, SgnsConfig};
use lexalign::unmt::{init_unmt_from_mlm, train_unmt, translate, DecodeConfig, Seq2Seq, UnmtTrainConfig, ValidationSet};
use lexalign::vecmap::{align_to_model_space, concat_mapped, seed_identical, self_learn, BilingualDictionary, MapConfig, Provenance};
use lexalign::{EmbeddingMatrix32, Error, Result};

use crate::{Command, InitArg, MethodArg, StageArgs, ThresholdFailure};

/// Bookkeeping for one subcommand: its effective config, the artifacts it
/// read and wrote, and where the manifest fragment goes.
struct Fragment {
    stage: &'static str,
    config: KeyValues,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: Option<PathBuf>,
    started: Instant,
}

impl Fragment {
    /// Checks that every input exists before any work starts.
    fn new(stage: &'static str, config: KeyValues, inputs: Vec<PathBuf>, manifest: Option<PathBuf>) -> Result<Self> {
        let missing: Vec<String> =
            inputs.iter().filter(|p| !p.is_file()).map(|p| format!("missing input artifact {}", p.display())).collect();
        if !missing.is_empty() {
            return Err(Error::Config(missing));
        }
        Ok(Fragment { stage, config, seed: 0, inputs, outputs: Vec::new(), manifest, started: Instant::now() })
    }

    fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Hashes the outputs and writes the fragment, by default next to the
    /// first output.
    fn finish(self) -> Result<()> {
        let Some(path) = self.manifest.clone().or_else(|| {
            self.outputs.first().map(|o| {
                let mut s = o.clone().into_os_string();
                s.push(".manifest");
                PathBuf::from(s)
            })
        }) else {
            return Ok(());
        };
        let outputs = self.outputs.iter().map(|p| Artifact::hash(Path::new(""), p)).collect::<Result<Vec<_>>>()?;
        let seconds = if deterministic_mode() { 0.0 } else { (self.started.elapsed().as_secs_f64() * 1e3).round() / 1e3 };
        let record = StageRecord {
            stage: self.stage.to_string(),
            config_hash: self.config.hash(),
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            seconds,
        };
        std::fs::write(&path, record.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Reads a stage config from an optional file plus `--set` overrides and
/// validates it, reporting every problem at once.
fn stage_config<C: KvConfig>(args: &StageArgs) -> Result<C> {
    let mut kv = match &args.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    let mut errs = Vec::new();
    for s in &args.sets {
        match s.split_once('=') {
            Some((k, v)) => kv.set(k.trim(), v.trim()),
            None => errs.push(format!("--set {s:?}: expected KEY=VALUE")),
        }
    }
    match C::from_kv(&kv) {
        Ok(c) if errs.is_empty() => Ok(c),
        Ok(_) => Err(Error::Config(errs)),
        Err(Error::Config(more)) => {
            errs.extend(more);
            Err(Error::Config(errs))
        }
        Err(e) => Err(e),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn load_mlm(ckpt: &Path, vocab: Vocabulary) -> Result<MlmModel<f32>> {
    MlmModel::from_checkpoint(load_checkpoint(ckpt)?, vocab)
}

fn threshold(what: &str, value: f64, min: Option<f64>) -> anyhow::Result<()> {
    match min {
        Some(m) if value < m => Err(ThresholdFailure(format!("{what} {value:.4} is below the required {m}")).into()),
        _ => Ok(()),
    }
}

pub fn run(command: Command) -> anyhow::Result<()> {
    let name = stage_name(&command);
    let wrap = |e: Error| Error::Stage { stage: name, source: Box::new(e) };
    match command {
        Command::BpeLearn { input, merges, output, vocab, min_count, stage } => {
            let mut kv = KeyValues::new();
            kv.set("merges", merges);
            kv.set("min_count", min_count);
            let mut frag = Fragment::new(name, kv, input.clone(), stage.manifest).map_err(wrap)?;
            (|| {
                let parts = input.iter().map(|p| Corpus::read_raw(p, "text")).collect::<Result<Vec<_>>>()?;
                let joint = Corpus::concat("joint", &parts.iter().collect::<Vec<_>>());
                let bpe = learn_bpe(&joint, merges)?;
                bpe.save(&output)?;
                frag.output(&output);
                if let Some(v) = &vocab {
                    build_vocab(&bpe.apply_corpus(&joint), min_count, &STANDARD_SPECIALS)?.save(v)?;
                    frag.output(v);
                }
                println!("learned {} merges", bpe.merges().len());
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::BpeApply { codes, input, output, max_len, stage } => {
            let mut kv = KeyValues::new();
            if let Some(m) = max_len {
                kv.set("max_len", m);
            }
            let mut frag = Fragment::new(name, kv, vec![codes.clone(), input.clone()], stage.manifest).map_err(wrap)?;
            (|| {
                let bpe = BpeModel::load(&codes)?;
                let mut c = bpe.apply_corpus(&Corpus::read_raw(&input, "text")?);
                if let Some(m) = max_len {
                    c = filter_long(&c, m)?;
                }
                c.write(&output)?;
                frag.output(&output);
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::EmbTrain { input, output, stage } => {
            let cfg: SgnsConfig = stage_config(&stage).map_err(wrap)?;
            let mut frag = Fragment::new(name, cfg.to_kv(), vec![input.clone()], stage.manifest).map_err(wrap)?.seed(cfg.seed);
            (|| {
                let emb = train_sgns::<f32>(&Corpus::read_tokenized(&input, "text")?, &cfg)?;
                emb.write_word2vec(&output)?;
                frag.output(&output);
                println!("trained {} vectors of dimension {}", emb.rows(), emb.dim());
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::Map { src, tgt, model, model_vocab, seed_dict, out_src, out_tgt, joint_vocab, joint_out, stage } => {
            let cfg: MapConfig = stage_config(&stage).map_err(wrap)?;
            let mut inputs = vec![src.clone()];
            inputs.extend(tgt.iter().chain(&model).chain(&model_vocab).chain(&seed_dict).chain(&joint_vocab).cloned());
            let mut frag = Fragment::new(name, cfg.to_kv(), inputs, stage.manifest).map_err(wrap)?.seed(cfg.seed);
            (|| {
                let xs = EmbeddingMatrix32::read_word2vec(&src)?;
                if let (Some(m), Some(v)) = (&model, &model_vocab) {
                    let mlm = load_mlm(m, Vocabulary::load(v)?)?;
                    let mapped = align_to_model_space(&xs, &regular_rows(&mlm.embedding_matrix())?, &cfg)?;
                    mapped.write_word2vec(&out_src)?;
                    frag.output(&out_src);
                    return frag.finish();
                }
                let zs = EmbeddingMatrix32::read_word2vec(tgt.as_ref().expect("clap requires --tgt"))?;
                let seed = match &seed_dict {
                    Some(p) => BilingualDictionary::load(p, Provenance::Seed)?,
                    None => seed_identical(xs.vocab(), zs.vocab())?,
                };
                let sol = self_learn(&xs, &zs, &seed, &cfg)?;
                print!("{}", sol.report());
                let (mx, mz) = (sol.map_source(&xs)?, sol.map_target(&zs)?);
                mx.write_word2vec(&out_src)?;
                frag.output(&out_src);
                if let Some(p) = &out_tgt {
                    mz.write_word2vec(p)?;
                    frag.output(p);
                }
                if let (Some(v), Some(out)) = (&joint_vocab, &joint_out) {
                    concat_mapped(&mx, &mz, &Vocabulary::load(v)?, cfg.seed)?.write_word2vec(out)?;
                    frag.output(out);
                }
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::MlmTrain {
            l1,
            l2,
            vocab,
            output,
            init,
            emb,
            from,
            model_config,
            valid_l1,
            valid_l2,
            metrics,
            init_seed,
            stage,
        } => {
            let cfg: MlmTrainConfig = stage_config(&stage).map_err(wrap)?;
            if !matches!(init, InitArg::Random) && emb.is_none() && from.is_none() {
                return Err(wrap(Error::invalid("--init aligned/frozen needs --emb")).into());
            }
            let mut inputs = vec![l1.clone(), l2.clone(), vocab.clone()];
            inputs.extend(emb.iter().chain(&from).chain(&model_config).chain(&valid_l1).chain(&valid_l2).cloned());
            let mut frag = Fragment::new(name, KeyValues::new(), inputs, stage.manifest).map_err(wrap)?.seed(cfg.seed);
            // The vocabulary fixes `vocab_size`, so it is read before the
            // model config is validated.
            let v = Vocabulary::load(&vocab).map_err(wrap)?;
            let mut model_kv = match &model_config {
                Some(p) => KeyValues::load(p).map_err(wrap)?,
                None => KeyValues::new(),
            };
            model_kv.set("vocab_size", v.len());
            let model_cfg = TransformerConfig::from_kv(&model_kv).map_err(wrap)?;
            frag.config = cfg.to_kv();
            model_cfg.write_to(&mut frag.config, "model.");
            frag.config.set("init", init.name());
            frag.config.set("init_seed", init_seed);
            (|| {
                let mut model = match &from {
                    Some(ckpt) => load_mlm(ckpt, v)?,
                    None => {
                        let table = emb.as_deref().map(EmbeddingMatrix32::read_word2vec).transpose()?;
                        let mode = match (init, table) {
                            (InitArg::Aligned, Some(t)) => InitMode::AlignedFinetuned(t),
                            (InitArg::Frozen, Some(t)) => InitMode::AlignedFrozen(t),
                            _ => InitMode::Random,
                        };
                        MlmModel::init(&model_cfg, v, &mode, init_seed)?
                    }
                };
                let train = [Corpus::read_tokenized(&l1, "l1")?, Corpus::read_tokenized(&l2, "l2")?];
                let valid: Vec<Corpus> = [&valid_l1, &valid_l2]
                    .into_iter()
                    .flatten()
                    .map(|p| Corpus::read_tokenized(p, "valid"))
                    .collect::<Result<_>>()?;
                let m = train_mlm(&mut model, &[&train[0], &train[1]], &valid.iter().collect::<Vec<_>>(), &cfg)?;
                save_checkpoint(&model.checkpoint(), &output)?;
                frag.output(&output);
                if let Some(p) = &metrics {
                    write_text(p, &m.to_tsv())?;
                    frag.output(p);
                }
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::VocabExtend { model, model_vocab, vocab, output, emb, seed, stage } => {
            let mut kv = KeyValues::new();
            kv.set("init", if emb.is_some() { "aligned" } else { "random" });
            let mut inputs = vec![model.clone(), model_vocab.clone(), vocab.clone()];
            inputs.extend(emb.clone());
            let mut frag = Fragment::new(name, kv, inputs, stage.manifest).map_err(wrap)?.seed(seed);
            (|| {
                let base = load_mlm(&model, Vocabulary::load(&model_vocab)?)?;
                let init = match &emb {
                    Some(p) => ExtendInit::Aligned(EmbeddingMatrix32::read_word2vec(p)?),
                    None => ExtendInit::Random { seed },
                };
                let grown = extend_vocab(&base, Vocabulary::load(&vocab)?, &init)?;
                save_checkpoint(&grown.checkpoint(), &output)?;
                frag.output(&output);
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::UnmtTrain { mlm, vocab, l1, l2, output, bpe, valid_l1, valid_l2, metrics, init_seed, stage } => {
            let cfg: UnmtTrainConfig = stage_config(&stage).map_err(wrap)?;
            let mut kv = cfg.to_kv();
            kv.set("init_seed", init_seed);
            let mut inputs = vec![mlm.clone(), vocab.clone(), l1.clone(), l2.clone()];
            inputs.extend(bpe.iter().chain(&valid_l1).chain(&valid_l2).cloned());
            let mut frag = Fragment::new(name, kv, inputs, stage.manifest).map_err(wrap)?.seed(cfg.seed);
            (|| {
                let base = load_mlm(&mlm, Vocabulary::load(&vocab)?)?;
                let mut s2s = init_unmt_from_mlm(&base, &base.config, init_seed)?;
                let train = [Corpus::read_tokenized(&l1, "l1")?, Corpus::read_tokenized(&l2, "l2")?];
                let valid = match (&bpe, &valid_l1, &valid_l2) {
                    (Some(codes), Some(a), Some(b)) => {
                        let bpe = BpeModel::load(codes)?;
                        let raw = read_parallel(a, b)?;
                        [(0, 1), (1, 0)]
                            .map(|(s, t)| ValidationSet {
                                src_lang: s,
                                tgt_lang: t,
                                sources: bpe.apply_corpus(&raw[s]),
                                references: references(&raw[t]),
                            })
                            .to_vec()
                    }
                    _ => Vec::new(),
                };
                let m = train_unmt(&mut s2s, [&train[0], &train[1]], &valid, &cfg)?;
                save_checkpoint(&s2s.checkpoint(), &output)?;
                frag.output(&output);
                if let Some(p) = &metrics {
                    write_text(p, &m.to_tsv())?;
                    frag.output(p);
                }
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::Translate { model, vocab, bpe, input, output, src_lang, tgt_lang, stage } => {
            let cfg: DecodeConfig = stage_config(&stage).map_err(wrap)?;
            let inputs = vec![model.clone(), vocab.clone(), bpe.clone(), input.clone()];
            let mut frag = Fragment::new(name, cfg.to_kv(), inputs, stage.manifest).map_err(wrap)?;
            (|| {
                let s2s = Seq2Seq::<f32>::from_checkpoint(load_checkpoint(&model)?, Vocabulary::load(&vocab)?)?;
                let src = BpeModel::load(&bpe)?.apply_corpus(&Corpus::read_raw(&input, "src")?);
                let hyps = translate(&s2s, &src, src_lang.index(), tgt_lang.index(), &cfg)?;
                write_text(&output, &hyps.iter().map(|h| format!("{h}\n")).collect::<String>())?;
                frag.output(&output);
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::EvalBli {
            src_emb,
            tgt_emb,
            dict,
            candidates,
            bpe,
            k,
            method,
            csls_k,
            output,
            min_precision,
            stage,
        } => {
            let mut kv = KeyValues::new();
            kv.set("k", k);
            kv.set("csls_k", csls_k);
            let mut inputs = vec![src_emb.clone(), dict.clone()];
            inputs.extend(tgt_emb.iter().chain(&candidates).chain(&bpe).cloned());
            let mut frag = Fragment::new(name, kv, inputs, stage.manifest.clone()).map_err(wrap)?;
            let reports = (|| {
                if k == 0 || csls_k == 0 {
                    return Err(Error::invalid("--k and --csls-k must be at least 1"));
                }
                let gold = BilingualDictionary::load(&dict, Provenance::Gold)?;
                let bpe = bpe.as_deref().map(BpeModel::load).transpose()?;
                let xs = EmbeddingMatrix32::read_word2vec(&src_emb)?;
                let zs = match &tgt_emb {
                    Some(p) => EmbeddingMatrix32::read_word2vec(p)?,
                    None => xs.clone(),
                };
                let src_words: Vec<String> = gold.pairs().iter().map(|p| p.0.clone()).collect();
                let tgt_words: Vec<String> = match &candidates {
                    Some(p) => {
                        let c = Corpus::read_tokenized(p, "candidates")?;
                        let mut seen = BTreeSet::new();
                        c.sentences.into_iter().flatten().filter(|w| seen.insert(w.clone())).collect()
                    }
                    None => gold.pairs().iter().map(|p| p.1.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
                };
                let (s, _) = word_matrix(&src_words, bpe.as_ref(), &xs)?;
                let (t, _) = word_matrix(&tgt_words, bpe.as_ref(), &zs)?;
                let methods = match method {
                    MethodArg::Nn => vec![BliMethod::Nn],
                    MethodArg::Csls => vec![BliMethod::Csls],
                    MethodArg::Both => vec![BliMethod::Nn, BliMethod::Csls],
                };
                let reports =
                    methods.into_iter().map(|m| bli_precision(&s, &t, &gold, k, m, csls_k)).collect::<Result<Vec<_>>>()?;
                for r in &reports {
                    println!("{r}");
                }
                if let Some(p) = &output {
                    write_text(p, &reports.iter().map(|r| r.tsv() + "\n").collect::<String>())?;
                    frag.output(p);
                }
                frag.finish()?;
                Ok(reports)
            })()
            .map_err(wrap)?;
            for r in reports {
                threshold(&format!("P@{} ({})", r.k, r.method), r.precision, min_precision)?;
            }
        }
        Command::EvalBleu { hyp, reference, output, min_bleu, stage } => {
            let mut frag = Fragment::new(name, KeyValues::new(), vec![hyp.clone(), reference.clone()], stage.manifest)
                .map_err(wrap)?;
            let report = (|| {
                let r = bleu(&read_lines(&hyp)?, &read_lines(&reference)?)?;
                println!("{r}");
                if let Some(p) = &output {
                    write_text(p, &(r.tsv() + "\n"))?;
                    frag.output(p);
                }
                frag.finish()?;
                Ok(r)
            })()
            .map_err(wrap)?;
            threshold("BLEU", report.bleu, min_bleu)?;
        }
        Command::EvalChrf { hyp, reference, order, beta, output, min_chrf, stage } => {
            let mut kv = KeyValues::new();
            kv.set("order", order);
            kv.set("beta", beta);
            let mut frag = Fragment::new(name, kv, vec![hyp.clone(), reference.clone()], stage.manifest).map_err(wrap)?;
            let score = (|| {
                if order == 0 || !(beta > 0.0) {
                    return Err(Error::invalid("--order must be >= 1 and --beta > 0"));
                }
                let s = chrf(&read_lines(&hyp)?, &read_lines(&reference)?, order, beta)?;
                println!("chrF{} = {s:.2}", if beta == 2.0 { "2" } else { "" });
                if let Some(p) = &output {
                    write_text(p, &format!("chrf\t{s:.4}\n"))?;
                    frag.output(p);
                }
                frag.finish()?;
                Ok(s)
            })()
            .map_err(wrap)?;
            threshold("chrF", score, min_chrf)?;
        }
        Command::GenCipher { out_dir, valid, test, stage } => {
            let spec: CipherSpec = stage_config(&stage).map_err(wrap)?;
            let mut kv = spec.to_kv();
            kv.set("valid", valid);
            kv.set("test", test);
            let manifest = stage.manifest.clone().or_else(|| Some(out_dir.join("gen-cipher.manifest")));
            let mut frag = Fragment::new(name, kv, Vec::new(), manifest).map_err(wrap)?.seed(spec.seed);
            (|| {
                std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
                let c = Cipher::new(&spec)?;
                let (a, b) = c.monolingual();
                let (va, vb) = c.parallel(valid, 1);
                let (ta, tb) = c.parallel(test, 2);
                for (file, corpus) in [
                    ("l1.train", &a),
                    ("l2.train", &b),
                    ("l1.valid", &va),
                    ("l2.valid", &vb),
                    ("l1.test", &ta),
                    ("l2.test", &tb),
                ] {
                    let p = out_dir.join(file);
                    corpus.write(&p)?;
                    frag.output(&p);
                }
                let p = out_dir.join("gold.dict");
                c.gold().save(&p)?;
                frag.output(&p);
                frag.finish()
            })()
            .map_err(wrap)?;
        }
        Command::Pipeline { experiment, config, out_dir, seed, smoke, min_bleu } => {
            let mut cfg = match &config {
                Some(p) => {
                    let kv = KeyValues::load(p)?;
                    PipelineConfig::from_experiment_kv(&kv, p.parent().unwrap_or(Path::new(".")), experiment)?
                }
                None => {
                    let exp = experiment.expect("clap requires --experiment");
                    if smoke {
                        PipelineConfig::smoke_scale(exp)
                    } else {
                        PipelineConfig::desk_scale(exp)
                    }
                }
            };
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let outcome = run_pipeline(&cfg, &out_dir)?;
            for r in outcome.mapping_bli.iter().chain(&outcome.mlm_bli) {
                println!("{r}");
            }
            for d in &outcome.directions {
                println!("l{}->l{}: {} chrF = {:.2}", d.src_lang + 1, d.tgt_lang + 1, d.bleu, d.chrf);
            }
            for d in &outcome.directions {
                threshold(&format!("l{}->l{} BLEU", d.src_lang + 1, d.tgt_lang + 1), d.bleu.bleu, min_bleu)?;
            }
        }
    }
    Ok(())
}

fn stage_name(c: &Command) -> &'static str {
    match c {
        Command::BpeLearn { .. } => "bpe-learn",
        Command::BpeApply { .. } => "bpe-apply",
        Command::EmbTrain { .. } => "emb-train",
        Command::Map { .. } => "map",
        Command::MlmTrain { .. } => "mlm-train",
        Command::VocabExtend { .. } => "vocab-extend",
        Command::UnmtTrain { .. } => "unmt-train",
        Command::Translate { .. } => "translate",
        Command::EvalBli { .. } => "eval-bli",
        Command::EvalBleu { .. } => "eval-bleu",
        Command::EvalChrf { .. } => "eval-chrf",
        Command::GenCipher { .. } => "gen-cipher",
        Command::Pipeline { .. } => "pipeline",
    }
}
