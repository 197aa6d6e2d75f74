//! The `spkxl` command line.
//!
//! Exit status: 0 on success, 2 for usage and configuration errors, 1 for
//! failures while running.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::autograd::LabelMode;
use crate::checkpoint;
use crate::config::CliConfig;
use crate::dialogue::{read_corpus, write_corpus, SpeakerSet};
use crate::encoding::{encode_corpus, EncodedRecord, Encoder, HistoryMode, SpeakerTokens, Vocab, WindowConfig};
use crate::error::Error;
use crate::experiment::{
    encode_splits, median_table, per_speaker_cap, run_matrix, run_variant, to_csv, Corpora, SyntheticConfig, Variant,
    CSV_HEADER,
};
use crate::gradcheck::audit_model;
use crate::metrics::median_of_runs;
use crate::model::ModelParams;
use crate::synthetic::generate_synthetic;
use crate::train::{evaluate_f1, finetune};

#[derive(Debug, Parser)]
#[command(
    name = "spkxl",
    version,
    about = "Speaker-aware relative-attention transformer for dialogue understanding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dialogue corpus as JSON Lines
    Synth(SynthArgs),
    /// Dump encoded model inputs for a corpus as JSON Lines
    Encode(EncodeArgs),
    /// Finetune a classifier and save the best-validation checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on a corpus
    Eval(EvalArgs),
    /// Train every variant at every history length and seed; write a CSV table
    Sweep(SweepArgs),
    /// Finite-difference audit of every model gradient in both forward modes
    Gradcheck(GradcheckArgs),
    /// Median test F1 over several seeds
    Median(MedianArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of dialogues [default: 200]
    #[arg(long)]
    pub n_dialogues: Option<usize>,
    /// Turns per dialogue [default: 8]
    #[arg(long)]
    pub turns: Option<usize>,
    /// Number of distinct topics [default: 4]
    #[arg(long)]
    pub topics: Option<usize>,
    /// Generator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Corpus to encode (JSON Lines)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Speaker symbol tokens: current-only, all or off
    #[arg(long, default_value = "current-only")]
    pub flags: SpeakerTokens,
    /// History representation: labels or tokens
    #[arg(long, default_value = "labels")]
    pub history: HistoryMode,
    /// Most recent history turns kept per speaker
    #[arg(long, default_value_t = 7)]
    pub per_speaker: usize,
    /// First turn index that is encoded
    #[arg(long, default_value_t = 0)]
    pub min_turn: usize,
    /// Maximum sequence length
    #[arg(long, default_value_t = 128)]
    pub max_seq_len: usize,
    /// The two speaker tags, first is speaker 0
    #[arg(long, default_value = "t,g", value_delimiter = ',', num_args = 2)]
    pub speakers: Vec<String>,
    /// Output file [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Settings shared by every training subcommand. Flags override the config
/// file, which overrides built-in defaults.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON config file; any field may be omitted [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, data order and dropout [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Speaker variant: blind, baseline, +spk_token, +rel_att or +both [default: none, use model flags]
    #[arg(long)]
    pub variant: Option<Variant>,

    /// Training corpus; without it the synthetic task is generated [default: none]
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    /// Validation corpus [default: none]
    #[arg(long)]
    pub valid_corpus: Option<PathBuf>,
    /// Test corpus [default: none]
    #[arg(long)]
    pub test_corpus: Option<PathBuf>,
    /// The two speaker tags, first is speaker 0 [default: t,g]
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub speakers: Option<Vec<String>>,
    /// Most recent history turns kept per speaker [default: 7]
    #[arg(long)]
    pub per_speaker: Option<usize>,
    /// History representation: labels or tokens [default: labels]
    #[arg(long)]
    pub history: Option<HistoryMode>,
    /// Turns before this index are only used as history [default: 0]
    #[arg(long)]
    pub min_turn: Option<usize>,

    /// Synthetic task: number of dialogues [default: 200]
    #[arg(long)]
    pub n_dialogues: Option<usize>,
    /// Synthetic task: turns per dialogue [default: 8]
    #[arg(long)]
    pub turns: Option<usize>,
    /// Synthetic task: number of topics [default: 4]
    #[arg(long)]
    pub topics: Option<usize>,
    /// Synthetic task: generator seed [default: 0]
    #[arg(long)]
    pub data_seed: Option<u64>,

    /// Transformer layers [default: 2]
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Hidden size [default: 64]
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Feed-forward inner size [default: 256]
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Maximum sequence length [default: 128]
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Dropout rate [default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Standard deviation of initial weights [default: 0.02]
    #[arg(long)]
    pub init_std: Option<f64>,
    /// Speaker symbol tokens: current-only, all or off [default: current-only]
    #[arg(long)]
    pub speaker_tokens: Option<SpeakerTokens>,
    /// Relative speaker attention on or off [default: false]
    #[arg(long)]
    pub rel_att: Option<bool>,
    /// Label mode: single or multi [default: single]
    #[arg(long)]
    pub label_mode: Option<LabelMode>,

    /// Peak learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Examples per step [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Optimizer steps [default: 500]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Linear warmup steps [default: 50]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Steps between validation evaluations [default: 100]
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint path
    #[arg(long, default_value = "spkxl.ckpt")]
    pub out: PathBuf,
    /// Training log (JSON Lines) [default: <out>.log.jsonl]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to score; without it the synthetic test split recorded in the checkpoint is used [default: none]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Variants to train
    #[arg(long, value_delimiter = ',', default_value = "baseline,+spk_token,+rel_att,+both")]
    pub variants: Vec<Variant>,
    /// Total history lengths; each speaker keeps ceil(L/2) turns
    #[arg(long = "l-values", value_delimiter = ',', default_value = "0,2,4,6")]
    pub l_values: Vec<usize>,
    /// Seeds per cell
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Output CSV [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed of the audited model and its permutation
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct MedianArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Seeds to run; an odd number
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Total history length; overrides --per-speaker with ceil(L/2) [default: none]
    #[arg(long = "l")]
    pub l: Option<usize>,
}

/// A failure with its exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad usage or configuration (exit 2).
    Usage(String),
    /// Error while running (exit 1).
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv`, runs the subcommand and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(code) => code,
        Err(f) => {
            let _ = out.flush();
            eprintln!("error: {}", f.message().replace('\n', " "));
            f.exit_code()
        }
    }
}

/// Runs a parsed command, writing results to `out`.
pub fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<i32> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Encode(a) => encode(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Median(a) => median(a, out),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(Error::io(path, e).to_string())
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_failure(p, e)),
        None => out
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Runtime(format!("writing output: {e}"))),
    }
}

fn line(out: &mut dyn Write, value: &serde_json::Value) -> CliResult<()> {
    writeln!(out, "{value}").map_err(|e| Failure::Runtime(format!("writing output: {e}")))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> CliResult<i32> {
    let d = SyntheticConfig::default();
    let speakers = SpeakerSet::default();
    let dialogues = generate_synthetic(
        a.n_dialogues.unwrap_or(d.n_dialogues),
        a.turns.unwrap_or(d.turns_per_dialogue),
        a.topics.unwrap_or(d.n_topics),
        a.seed.unwrap_or(d.seed),
        &speakers,
    )?;
    match &a.out {
        Some(p) => write_corpus(p, &dialogues)?,
        None => {
            let mut text = String::new();
            for d in &dialogues {
                text.push_str(&serde_json::to_string(d).map_err(Error::from)?);
                text.push('\n');
            }
            emit(out, None, &text)?;
        }
    }
    Ok(0)
}

fn encode(a: EncodeArgs, out: &mut dyn Write) -> CliResult<i32> {
    let speakers = SpeakerSet::from_tags(&a.speakers[0], &a.speakers[1]);
    let dialogues = read_corpus(&a.corpus, &speakers)?;
    let vocab = Vocab::build(&dialogues, &speakers);
    let encoder = Encoder {
        vocab,
        speakers,
        speaker_tokens: a.flags,
        max_seq_len: a.max_seq_len,
    };
    let window = WindowConfig {
        per_speaker: a.per_speaker,
        history_mode: a.history,
        min_turn: a.min_turn,
    };
    let mut text = String::new();
    for (r, input) in encode_corpus(&dialogues, &encoder, window)? {
        let record = EncodedRecord::new(&r, &input, &encoder.vocab);
        text.push_str(&serde_json::to_string(&record).map_err(Error::from)?);
        text.push('\n');
    }
    emit(out, a.out.as_deref(), &text)?;
    Ok(0)
}

/// Builds the effective configuration: defaults, then the file, then flags.
pub fn effective_config(a: &RunArgs) -> CliResult<CliConfig> {
    let mut cfg = match &a.config {
        Some(p) => CliConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => CliConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                cfg.$($field)+ = v;
            }
        };
    }
    set!(a.seed => seed);
    if a.variant.is_some() {
        cfg.variant = a.variant;
    }
    if a.train_corpus.is_some() {
        cfg.data.train = a.train_corpus.clone();
    }
    if a.valid_corpus.is_some() {
        cfg.data.valid = a.valid_corpus.clone();
    }
    if a.test_corpus.is_some() {
        cfg.data.test = a.test_corpus.clone();
    }
    if let Some(s) = &a.speakers {
        cfg.data.speakers = [s[0].clone(), s[1].clone()];
    }
    set!(a.per_speaker => data.window.per_speaker);
    set!(a.history => data.window.history_mode);
    set!(a.min_turn => data.window.min_turn);
    set!(a.n_dialogues => synthetic.n_dialogues);
    set!(a.turns => synthetic.turns_per_dialogue);
    set!(a.topics => synthetic.n_topics);
    set!(a.data_seed => synthetic.seed);
    set!(a.n_layers => model.n_layers);
    set!(a.d_model => model.d_model);
    set!(a.n_heads => model.n_heads);
    set!(a.d_ff => model.d_ff);
    set!(a.max_seq_len => model.max_seq_len);
    set!(a.dropout => model.dropout);
    set!(a.init_std => model.init_std);
    set!(a.speaker_tokens => model.speaker_tokens);
    set!(a.rel_att => model.relative_speaker_attention);
    set!(a.label_mode => model.label_mode);
    set!(a.lr => train.learning_rate);
    set!(a.batch_size => train.batch_size);
    set!(a.steps => train.total_steps);
    set!(a.warmup => train.warmup_steps);
    set!(a.eval_every => train.eval_every);
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(cfg: &CliConfig) -> CliResult<serde_json::Value> {
    let value = json!({ "config": cfg });
    eprintln!("{value}");
    Ok(value)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult<i32> {
    let cfg = effective_config(&a.run)?;
    let echoed = echo_config(&cfg)?;
    let corpora = cfg.corpora()?;
    if corpora.train.is_empty() {
        return Err(Failure::Usage("training corpus is empty".into()));
    }
    let model_cfg = corpora.sized(&cfg.model);
    let encoder = corpora.encoder(model_cfg.speaker_tokens, model_cfg.max_seq_len);
    let data = encode_splits(&corpora, &encoder, cfg.data.window)?;
    let params = ModelParams::init(&model_cfg)?;
    let labels = corpora.vocab.labels();
    let outcome = finetune(params, &data.train, &data.valid, labels, &cfg.train)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate_f1(&outcome.best, &data.test, labels)?)
    };

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = format!("{echoed}\n");
    log.push_str(&outcome.run.to_jsonl()?);
    fs::write(&log_path, log).map_err(|e| io_failure(&log_path, e))?;

    let meta = json!({
        "vocab": corpora.vocab,
        "speakers": corpora.speakers,
        "window": cfg.data.window,
        "train": cfg.train,
        "synthetic": cfg.uses_synthetic().then_some(cfg.synthetic),
        "best_step": outcome.run.best_step,
        "valid_f1": outcome.run.best_valid_f1,
    });
    let ckpt = a.out;
    checkpoint::save(&ckpt, &outcome.best, &meta)?;
    line(
        out,
        &json!({
            "checkpoint": ckpt,
            "log": log_path,
            "best_step": outcome.run.best_step,
            "valid_f1": outcome.run.best_valid_f1,
            "test": test,
        }),
    )?;
    Ok(0)
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &serde_json::Value, key: &str) -> CliResult<T> {
    serde_json::from_value(meta.get(key).cloned().unwrap_or(serde_json::Value::Null))
        .map_err(|e| Failure::Runtime(format!("checkpoint metadata `{key}`: {e}")))
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<i32> {
    let (params, meta) = checkpoint::load(&a.checkpoint)?;
    let vocab: Vocab = meta_field(&meta, "vocab")?;
    let speakers: SpeakerSet = meta_field(&meta, "speakers")?;
    let window: WindowConfig = meta_field(&meta, "window")?;
    let dialogues = match &a.corpus {
        Some(p) => read_corpus(p, &speakers)?,
        None => {
            let synthetic: Option<SyntheticConfig> = meta_field(&meta, "synthetic")?;
            let synthetic = synthetic.ok_or_else(|| {
                Failure::Usage("checkpoint was not trained on the synthetic task; pass --corpus".into())
            })?;
            Corpora::synthetic(&synthetic)?.test
        }
    };
    let encoder = Encoder {
        vocab,
        speakers,
        speaker_tokens: params.config.speaker_tokens,
        max_seq_len: params.config.max_seq_len,
    };
    let examples: Vec<_> = encode_corpus(&dialogues, &encoder, window)?
        .into_iter()
        .map(|(_, e)| e)
        .collect();
    let report = evaluate_f1(&params, &examples, encoder.vocab.labels())?;
    line(out, &json!(report))?;
    Ok(0)
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> CliResult<i32> {
    let cfg = effective_config(&a.run)?;
    echo_config(&cfg)?;
    let corpora = cfg.corpora()?;
    let rows = run_matrix(
        &corpora,
        &a.variants,
        &a.l_values,
        &a.seeds,
        cfg.data.window,
        &cfg.model,
        &cfg.train,
        |pair| {
            for r in pair {
                eprintln!("{}", r.to_csv());
            }
        },
    )?;
    emit(out, a.out.as_deref(), &to_csv(&rows))?;
    if a.seeds.len() % 2 == 1 {
        for (v, l, m) in median_table(&rows)? {
            eprintln!("median test f1 {v} L={l}: {m:.4}");
        }
    }
    debug_assert!(to_csv(&rows).starts_with(CSV_HEADER));
    Ok(0)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<i32> {
    let audit = audit_model(a.seed)?;
    let max = audit.max_rel_error();
    line(
        out,
        &json!({
            "seed": a.seed,
            "max_rel_error": max,
            "finetune": { "max_rel_error": audit.finetune.max_rel_error, "worst": audit.finetune_worst, "checked": audit.finetune.checked },
            "pretrain": { "max_rel_error": audit.pretrain.max_rel_error, "worst": audit.pretrain_worst, "checked": audit.pretrain.checked },
            "pass": max <= a.tolerance,
        }),
    )?;
    Ok(if max <= a.tolerance { 0 } else { 1 })
}

fn median(a: MedianArgs, out: &mut dyn Write) -> CliResult<i32> {
    let mut cfg = effective_config(&a.run)?;
    if let Some(l) = a.l {
        cfg.data.window.per_speaker = per_speaker_cap(l);
    }
    echo_config(&cfg)?;
    let variant = cfg
        .variant
        .ok_or_else(|| Failure::Usage("median needs --variant (or `variant` in the config)".into()))?;
    let corpora = cfg.corpora()?;
    let report = median_of_runs(&a.seeds, |seed| {
        let o = run_variant(&corpora, variant, cfg.data.window, &cfg.model, &cfg.train, seed)?;
        eprintln!("seed {seed}: test f1 {:.4}", o.test.f1);
        Ok(o.test.f1)
    })?;
    line(
        out,
        &json!({ "variant": variant, "median_f1": report.median, "per_seed": report.per_seed }),
    )?;
    Ok(0)
}
