use std::path::Path;
use std::process::{Command, Output};

fn lexalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexalign")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = lexalign(dir, args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const MODEL: &str = "layers=1\nmodel_dim=16\nheads=2\nffn_dim=32\nmax_positions=24\n";

/// A tiny cipher pair, segmented, with a vocabulary.
fn prepared() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["gen-cipher", "--out-dir", "data", "--set", "vocab_size=60", "--set", "sentences=400", "--valid", "6", "--test", "6"]);
    ok(d, &["bpe-learn", "--input", "data/l1.train", "data/l2.train", "--merges", "2000", "--output", "bpe.codes", "--vocab", "vocab.txt"]);
    for l in ["l1", "l2"] {
        ok(d, &["bpe-apply", "--codes", "bpe.codes", "--input", &format!("data/{l}.train"), "--output", &format!("{l}.bpe"), "--max-len", "20"]);
    }
    std::fs::write(d.join("model.cfg"), MODEL).unwrap();
    t
}

#[test]
fn stages_chain_into_a_translation() {
    let t = prepared();
    let d = t.path();
    for (l, seed) in [("l1", "1"), ("l2", "2")] {
        let out = ok(d, &["emb-train", "--input", &format!("{l}.bpe"), "--output", &format!("{l}.vec"), "--set", "dim=16", "--set", "epochs=2", "--set", &format!("seed={seed}")]);
        assert!(out.contains("dimension 16"));
    }
    ok(d, &["map", "--src", "l1.vec", "--tgt", "l2.vec", "--out-src", "m1.vec", "--out-tgt", "m2.vec", "--joint-vocab", "vocab.txt", "--joint-out", "joint.vec"]);
    ok(d, &[
        "mlm-train", "--l1", "l1.bpe", "--l2", "l2.bpe", "--vocab", "vocab.txt", "--output", "mlm.ckpt", "--init", "aligned", "--emb",
        "joint.vec", "--model-config", "model.cfg", "--set", "steps=3", "--set", "batch_size=4", "--metrics", "mlm.tsv",
    ]);
    ok(d, &[
        "unmt-train", "--mlm", "mlm.ckpt", "--vocab", "vocab.txt", "--l1", "l1.bpe", "--l2", "l2.bpe", "--output", "unmt.ckpt", "--bpe",
        "bpe.codes", "--valid-l1", "data/l1.valid", "--valid-l2", "data/l2.valid", "--set", "steps=2", "--set", "batch_size=4",
    ]);
    ok(d, &[
        "translate", "--model", "unmt.ckpt", "--vocab", "vocab.txt", "--bpe", "bpe.codes", "--input", "data/l2.test", "--output", "hyp.txt",
        "--src-lang", "l2", "--tgt-lang", "l1", "--set", "beam_size=2",
    ]);
    let hyps = std::fs::read_to_string(d.join("hyp.txt")).unwrap();
    assert_eq!(hyps.lines().count(), 6);
    let bleu = ok(d, &["eval-bleu", "--hyp", "hyp.txt", "--ref", "data/l1.test", "--output", "bleu.tsv"]);
    assert!(bleu.starts_with("BLEU = "), "{bleu}");
    let chrf = ok(d, &["eval-chrf", "--hyp", "hyp.txt", "--ref", "data/l1.test"]);
    assert!(chrf.starts_with("chrF = "), "{chrf}");
    let bli = ok(d, &["eval-bli", "--src-emb", "m1.vec", "--tgt-emb", "m2.vec", "--dict", "data/gold.dict", "--method", "csls", "--k", "1"]);
    assert!(bli.starts_with("P@1 (CSLS)"), "{bli}");

    // Every stage left a manifest fragment whose hashes match its outputs.
    let fragment = std::fs::read_to_string(d.join("mlm.ckpt.manifest")).unwrap();
    assert!(fragment.starts_with("[mlm-train]\n"), "{fragment}");
    assert!(fragment.contains("input=joint.vec") && fragment.contains(" mlm.tsv"));
    for f in ["bpe.codes", "l1.vec", "m1.vec", "unmt.ckpt", "hyp.txt", "bleu.tsv", "data/gen-cipher"] {
        assert!(d.join(format!("{f}.manifest")).is_file(), "no fragment for {f}");
    }
}

#[test]
fn relm_stages_extend_and_align() {
    let t = prepared();
    let d = t.path();
    ok(d, &["bpe-learn", "--input", "data/l1.train", "--merges", "2000", "--output", "l1.codes", "--vocab", "vocab.l1.txt"]);
    ok(d, &[
        "mlm-train", "--l1", "l1.bpe", "--l2", "l1.bpe", "--vocab", "vocab.l1.txt", "--output", "pre.ckpt", "--model-config", "model.cfg",
        "--set", "steps=2", "--set", "batch_size=4", "--set", "schedule=1,0",
    ]);
    ok(d, &["emb-train", "--input", "l2.bpe", "--output", "l2.vec", "--set", "dim=16", "--set", "epochs=1"]);
    ok(d, &["map", "--src", "l2.vec", "--model", "pre.ckpt", "--model-vocab", "vocab.l1.txt", "--out-src", "l2.mapped.vec"]);
    ok(d, &["vocab-extend", "--model", "pre.ckpt", "--model-vocab", "vocab.l1.txt", "--vocab", "vocab.txt", "--output", "ext.ckpt", "--emb", "l2.mapped.vec"]);
    ok(d, &[
        "mlm-train", "--l1", "l1.bpe", "--l2", "l2.bpe", "--vocab", "vocab.txt", "--output", "mlm.ckpt", "--from", "ext.ckpt", "--set",
        "steps=2", "--set", "batch_size=4",
    ]);
    // A checkpoint cannot be paired with another vocabulary.
    let o = lexalign(d, &["vocab-extend", "--model", "pre.ckpt", "--model-vocab", "vocab.txt", "--vocab", "vocab.txt", "--output", "x.ckpt"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("stage vocab-extend"));
}

#[test]
fn config_problems_are_reported_together_with_exit_1() {
    let t = prepared();
    let d = t.path();
    std::fs::write(d.join("sgns.cfg"), "dim=0\nwindow=x\n").unwrap();
    let o = lexalign(d, &["emb-train", "--input", "l1.bpe", "--output", "e.vec", "--config", "sgns.cfg", "--set", "bogus=1", "--set", "nokey"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("stage emb-train"), "{err}");
    for needle in ["window", "bogus", "nokey"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
    assert!(!d.join("e.vec").exists());
}

#[test]
fn missing_and_corrupt_artifacts_name_the_stage() {
    let t = prepared();
    let d = t.path();
    let args = |model: &str| {
        [
            "translate", "--model", model, "--vocab", "vocab.txt", "--bpe", "bpe.codes", "--input", "data/l1.test", "--output", "h.txt",
            "--src-lang", "l1", "--tgt-lang", "l2",
        ]
        .map(String::from)
    };
    let o = lexalign(d, &args("nope.ckpt").each_ref().map(String::as_str));
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stage translate") && stderr(&o).contains("nope.ckpt"));

    std::fs::write(d.join("bad.ckpt"), b"LXCKPT\0\0garbage").unwrap();
    let o = lexalign(d, &args("bad.ckpt").each_ref().map(String::as_str));
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage translate") && stderr(&o).contains("corrupt"), "{}", stderr(&o));
}

#[test]
fn thresholds_gate_with_exit_3() {
    let t = prepared();
    let d = t.path();
    std::fs::write(d.join("hyp"), "a b c d\n").unwrap();
    std::fs::write(d.join("ref"), "a b c d\n").unwrap();
    ok(d, &["eval-bleu", "--hyp", "hyp", "--ref", "ref", "--min-bleu", "99"]);
    std::fs::write(d.join("hyp"), "a b x y\n").unwrap();
    let o = lexalign(d, &["eval-bleu", "--hyp", "hyp", "--ref", "ref", "--min-bleu", "99"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = lexalign(d, &["eval-chrf", "--hyp", "hyp", "--ref", "ref", "--min-chrf", "99"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&lexalign(d.path(), &["--help"])), 0);
    assert_eq!(code(&lexalign(d.path(), &["no-such-command"])), 1);
    let o = lexalign(d.path(), &["pipeline", "--experiment", "xlm", "--out-dir", "o"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lexically-aligned-xlm"));
}

#[test]
fn pipeline_runs_from_an_experiment_file() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    // Start from the smoke settings via stage files.
    std::fs::write(d.join("data.cfg"), "cipher.vocab_size=60\ncipher.sentences=400\nvalid_sentences=4\ntest_sentences=4\n").unwrap();
    std::fs::write(d.join("model.cfg"), MODEL).unwrap();
    std::fs::write(d.join("bpe.cfg"), "max_len=20\n").unwrap();
    std::fs::write(d.join("sgns.cfg"), "dim=16\nepochs=1\n").unwrap();
    for s in ["mlm", "pretrain"] {
        std::fs::write(d.join(format!("{s}.cfg")), "steps=2\nbatch_size=4\n").unwrap();
    }
    std::fs::write(d.join("unmt.cfg"), "steps=2\nbatch_size=4\neval_every=1\n").unwrap();
    std::fs::write(
        d.join("exp.cfg"),
        "experiment=joint-embedding-ablation\nseed=3\ndata=data.cfg\nmodel=model.cfg\nbpe=bpe.cfg\nsgns=sgns.cfg\nmlm=mlm.cfg\npretrain=pretrain.cfg\nunmt=unmt.cfg\n",
    )
    .unwrap();
    let out = ok(d, &["pipeline", "--config", "exp.cfg", "--out-dir", "run"]);
    assert!(out.contains("l1->l2: BLEU"), "{out}");
    let manifest = std::fs::read_to_string(d.join("run/manifest.txt")).unwrap();
    assert!(manifest.starts_with("experiment=joint-embedding-ablation\nseed=3\n"));
    assert!(manifest.contains("[emb-train]") && !manifest.contains("[map]"));

    // Near-perfect BLEU is out of reach at this size.
    let o = lexalign(d, &["pipeline", "--config", "exp.cfg", "--out-dir", "run2", "--min-bleu", "99"]);
    assert_eq!(code(&o), 3);

    std::fs::write(d.join("bad.cfg"), "experiment=xlm-baseline\nunmt=unmt.cfg\nmodel=missing.cfg\nwhat=1\n").unwrap();
    let o = lexalign(d, &["pipeline", "--config", "bad.cfg", "--out-dir", "run3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.cfg") && stderr(&o).contains("what"), "{}", stderr(&o));
}

#[test]
fn smoke_pipelines_are_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let run = |out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_lexalign"))
            .current_dir(d)
            .env("LEXALIGN_DETERMINISTIC", "1")
            .args(["pipeline", "--experiment", "lexically-aligned-relm", "--smoke", "--out-dir", out])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run("a");
    run("b");
    let a = std::fs::read(d.join("a/manifest.txt")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/manifest.txt")).unwrap());
    assert!(String::from_utf8(a).unwrap().contains("deterministic=true\n"));
}
