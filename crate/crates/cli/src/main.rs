//! `lexalign`: composable pipeline stages and whole experiments.
//!
//! Exit codes: 0 success, 1 invalid configuration or input, 2 runtime
//! failure, 3 a requested score threshold was not met.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "lexalign", version, about = "Lexically aligned MLM pretraining for unsupervised MT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config options shared by every stage.
#[derive(Args, Clone, Default)]
pub struct StageArgs {
    /// Key-value config file for this stage.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Where to write the manifest fragment (default: next to the main output).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Lang {
    L1,
    L2,
}

impl Lang {
    fn index(self) -> usize {
        match self {
            Lang::L1 => 0,
            Lang::L2 => 1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum InitArg {
    Random,
    Aligned,
    Frozen,
}

impl InitArg {
    fn name(self) -> &'static str {
        match self {
            InitArg::Random => "random",
            InitArg::Aligned => "aligned",
            InitArg::Frozen => "frozen",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Nn,
    Csls,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Learn joint BPE merges from raw text files.
    BpeLearn {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
        /// Also write the model vocabulary of the segmented inputs.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: u64,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Segment a raw text file with learned merges.
    BpeApply {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Drop sentences with more subwords than this.
        #[arg(long)]
        max_len: Option<usize>,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Train skip-gram embeddings on a tokenized file.
    EmbTrain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Map two embedding spaces into one, or one space onto a model's table.
    Map {
        #[arg(long)]
        src: PathBuf,
        /// Target embeddings; omit when mapping onto `--model`.
        #[arg(long, required_unless_present = "model")]
        tgt: Option<PathBuf>,
        /// MLM checkpoint whose token table is the target space.
        #[arg(long, requires = "model_vocab", conflicts_with = "tgt")]
        model: Option<PathBuf>,
        #[arg(long)]
        model_vocab: Option<PathBuf>,
        /// Seed dictionary; identical strings are used when omitted.
        #[arg(long)]
        seed_dict: Option<PathBuf>,
        #[arg(long)]
        out_src: PathBuf,
        #[arg(long)]
        out_tgt: Option<PathBuf>,
        /// Model vocabulary for a joint table of both mapped spaces.
        #[arg(long, requires = "joint_out")]
        joint_vocab: Option<PathBuf>,
        #[arg(long)]
        joint_out: Option<PathBuf>,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Train a masked language model.
    MlmTrain {
        #[arg(long)]
        l1: PathBuf,
        #[arg(long)]
        l2: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "random")]
        init: InitArg,
        /// Embedding table over the model vocabulary for aligned inits.
        #[arg(long)]
        emb: Option<PathBuf>,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long, conflicts_with = "emb")]
        from: Option<PathBuf>,
        /// Transformer config file; `vocab_size` comes from the vocabulary.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        valid_l1: Option<PathBuf>,
        #[arg(long)]
        valid_l2: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        init_seed: u64,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Grow a trained MLM to a larger vocabulary.
    VocabExtend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        model_vocab: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Initialize new rows from these embeddings instead of randomly.
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Train an encoder-decoder from an MLM with denoising and back-translation.
    UnmtTrain {
        #[arg(long)]
        mlm: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        l1: PathBuf,
        #[arg(long)]
        l2: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Merges used to segment the validation sources.
        #[arg(long, requires_all = ["valid_l1", "valid_l2"])]
        bpe: Option<PathBuf>,
        /// Raw parallel validation text.
        #[arg(long)]
        valid_l1: Option<PathBuf>,
        #[arg(long)]
        valid_l2: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        init_seed: u64,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Translate raw text with a trained model.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        bpe: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        src_lang: Lang,
        #[arg(long, value_enum)]
        tgt_lang: Lang,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Bilingual lexicon induction precision of embedding spaces.
    EvalBli {
        #[arg(long)]
        src_emb: PathBuf,
        /// Defaults to the source file (a shared space).
        #[arg(long)]
        tgt_emb: Option<PathBuf>,
        #[arg(long)]
        dict: PathBuf,
        /// Tokenized text whose words are the retrieval candidates
        /// (default: the dictionary's targets).
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Merges for composing word vectors from subwords.
        #[arg(long)]
        bpe: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value = "both")]
        method: MethodArg,
        #[arg(long, default_value_t = 10)]
        csls_k: usize,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Exit with code 3 when any precision is below this (in [0, 1]).
        #[arg(long)]
        min_precision: Option<f64>,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Corpus BLEU of hypotheses against references.
    EvalBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        min_bleu: Option<f64>,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Corpus chrF of hypotheses against references.
    EvalChrf {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 6)]
        order: usize,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        min_chrf: Option<f64>,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Generate a synthetic cipher language pair with gold lexicon.
    GenCipher {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        valid: usize,
        #[arg(long, default_value_t = 300)]
        test: usize,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Run a whole experiment.
    Pipeline {
        #[arg(long, required_unless_present = "config")]
        experiment: Option<lexalign::pipeline::Experiment>,
        /// Experiment file naming the per-stage config files.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Seconds-long settings that only check the wiring.
        #[arg(long)]
        smoke: bool,
        /// Exit with code 3 unless both directions reach this test BLEU.
        #[arg(long)]
        min_bleu: Option<f64>,
    },
}

/// A score fell short of a user-requested threshold.
#[derive(Debug)]
pub struct ThresholdFailure(pub String);

impl std::fmt::Display for ThresholdFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ThresholdFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ThresholdFailure>().is_some() {
        3
    } else if err.downcast_ref::<lexalign::Error>().is_some_and(lexalign::Error::is_validation) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
