//! `case`: prepare data, print corpus statistics, train, evaluate and
//! generate.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use case_core::checkpoint::{ensure_vocabulary, load_checkpoint, save_checkpoint, write_atomic};
use case_core::config::{Ablation, ModelConfig};
use case_core::corpus::{encode_example, load_examples, EncodedExample, FrequencyTable, LengthLimits};
use case_core::decoder::DecodeStrategy;
use case_core::metrics::{generation_scores, ranking_metrics, MetricsReport};
use case_core::model::{prepare_training_example, CaseModel, TrainingExample};
use case_core::rps::ranking;
use case_core::stats::{corpus_statistics, load_word_frequencies, StatsOptions};
use case_core::trainer::{EvalWeights, TrainConfig, Trainer};
use case_core::vocab::{VocabSize, Vocabulary, TOKENIZER_SCHEME};
use case_core::CaseError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const CONFIG_ENV: &str = "CASE_CONFIG";
const PREPARED_EXAMPLES: &str = "examples.jsonl";
const PREPARED_META: &str = "meta.json";
const PREPARED_VOCAB: &str = "vocab.txt";
const PREPARED_FREQUENCIES: &str = "frequencies.tsv";
const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "case", version, about = "Passage-grounded conversational response generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a raw JSONL split into a prepared directory.
    Prepare(PrepareArgs),
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Train from a prepared directory into a checkpoint directory.
    Train(Box<TrainArgs>),
    /// Score generation and passage ranking on a prepared split.
    Eval(EvalArgs),
    /// Write one generated response per example as JSONL.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// Reuse an existing vocabulary (e.g. the training split's).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// `standard`, `compact` or an exact entry count.
    #[arg(long, default_value = "standard")]
    vocab_size: String,
    #[arg(long, default_value_t = 64)]
    max_query_len: usize,
    #[arg(long, default_value_t = 128)]
    max_passage_len: usize,
    #[arg(long, default_value_t = 64)]
    max_response_len: usize,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
    /// `word<TAB>count` lines used for the common-word ratios.
    #[arg(long)]
    word_frequencies: Option<PathBuf>,
    #[arg(long)]
    common_threshold: Option<u64>,
}

#[derive(Args)]
struct AblationFlags {
    #[arg(long)]
    disable_rps: bool,
    #[arg(long)]
    disable_sti: bool,
    #[arg(long)]
    plain_pointer: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    /// JSON with optional "model" and "train" objects; defaults to $CASE_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    #[command(flatten)]
    ablation: AblationFlags,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    lambda_rps: Option<f64>,
    #[arg(long)]
    lambda_sti: Option<f64>,
    #[arg(long)]
    lambda_rg: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    eval_weights: Option<WeightsArg>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    ffn_size: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    fusion_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Ema,
    Live,
}

impl From<WeightsArg> for EvalWeights {
    fn from(w: WeightsArg) -> Self {
        match w {
            WeightsArg::Ema => EvalWeights::Ema,
            WeightsArg::Live => EvalWeights::Live,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Beam,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the checkpoint's `eval_weights`.
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 4)]
    beam_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-example passage rankings as JSONL.
    #[arg(long)]
    ranking_output: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    output: PathBuf,
}

/// Bad flags or configuration.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Unreadable or malformed input files.
#[derive(Debug)]
struct DataError(String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<DataError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CaseError>() {
            return match e {
                CaseError::Config(_) => 1,
                CaseError::Io { .. } | CaseError::Parse { .. } | CaseError::Input(_) | CaseError::Checkpoint { .. } => 2,
                CaseError::Diverged { .. } => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(*a),
        Command::Eval(a) => cmd_eval(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// One line of a prepared split.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PreparedRecord {
    conversation_id: String,
    turn_index: u32,
    response: String,
    passage_ids: Vec<String>,
    encoded: EncodedExample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PreparedMeta {
    vocab_id: String,
    tokenizer: String,
    limits: LengthLimits,
    examples: usize,
}

struct Prepared {
    meta: PreparedMeta,
    vocab: Vocabulary,
    frequencies: FrequencyTable,
    records: Vec<PreparedRecord>,
}

fn parse_vocab_size(s: &str) -> anyhow::Result<VocabSize> {
    Ok(match s {
        "standard" => VocabSize::Standard,
        "compact" => VocabSize::Compact,
        n => VocabSize::Exact(
            n.parse()
                .map_err(|_| UsageError(format!("--vocab-size must be standard, compact or a number, got {n:?}")))?,
        ),
    })
}

fn cmd_prepare(a: PrepareArgs) -> anyhow::Result<()> {
    let limits = LengthLimits {
        max_query_len: a.max_query_len,
        max_passage_len: a.max_passage_len,
        max_response_len: a.max_response_len,
    };
    limits.validate()?;
    let size = parse_vocab_size(&a.vocab_size)?;
    let examples = load_examples(&a.input)?;
    let vocab = match &a.vocab {
        Some(path) => Vocabulary::load(path)?,
        None => {
            let texts = examples.iter().flat_map(|e| {
                e.queries
                    .iter()
                    .map(String::as_str)
                    .chain(e.passages.iter().map(|p| p.text.as_str()))
                    .chain(std::iter::once(e.response.as_str()))
            });
            Vocabulary::build(texts, size)?
        }
    };
    let encoded: Vec<EncodedExample> = examples.iter().map(|e| encode_example(e, &vocab, &limits)).collect();
    let frequencies = FrequencyTable::from_examples(&encoded, &vocab);

    fs::create_dir_all(&a.output_dir).with_context(|| format!("creating {}", a.output_dir.display()))?;
    let mut lines = Vec::new();
    for (ex, enc) in examples.iter().zip(encoded) {
        let record = PreparedRecord {
            conversation_id: ex.conversation_id.clone(),
            turn_index: ex.turn_index,
            response: ex.response.clone(),
            passage_ids: ex.passages.iter().map(|p| p.passage_id.clone()).collect(),
            encoded: enc,
        };
        serde_json::to_writer(&mut lines, &record)?;
        lines.push(b'\n');
    }
    write_atomic(&a.output_dir.join(PREPARED_EXAMPLES), &lines)?;
    vocab.save(a.output_dir.join(PREPARED_VOCAB))?;
    frequencies.save(a.output_dir.join(PREPARED_FREQUENCIES), &vocab)?;
    let meta = PreparedMeta {
        vocab_id: vocab.identifier(),
        tokenizer: TOKENIZER_SCHEME.into(),
        limits,
        examples: examples.len(),
    };
    write_atomic(&a.output_dir.join(PREPARED_META), &serde_json::to_vec_pretty(&meta)?)?;
    eprintln!(
        "prepared {} examples, vocabulary {} entries ({})",
        examples.len(),
        vocab.len(),
        meta.vocab_id
    );
    Ok(())
}

fn load_prepared(dir: &Path) -> anyhow::Result<Prepared> {
    let meta_path = dir.join(PREPARED_META);
    let meta_text = fs::read(&meta_path).map_err(|e| DataError(format!("{}: {e}", meta_path.display())))?;
    let meta: PreparedMeta =
        serde_json::from_slice(&meta_text).map_err(|e| DataError(format!("{}: {e}", meta_path.display())))?;
    let vocab = Vocabulary::load(dir.join(PREPARED_VOCAB))?;
    if vocab.identifier() != meta.vocab_id {
        bail!(DataError(format!("{}: vocabulary does not match its metadata", dir.display())));
    }
    let frequencies = FrequencyTable::load(dir.join(PREPARED_FREQUENCIES), &vocab)?;
    let path = dir.join(PREPARED_EXAMPLES);
    let file = fs::File::open(&path).map_err(|e| DataError(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PreparedRecord = serde_json::from_str(&line)
            .map_err(|e| DataError(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        records.push(r);
    }
    Ok(Prepared {
        meta,
        vocab,
        frequencies,
        records,
    })
}

fn cmd_stats(a: StatsArgs) -> anyhow::Result<()> {
    let examples = load_examples(&a.input)?;
    let options = StatsOptions {
        word_frequencies: a.word_frequencies.as_ref().map(load_word_frequencies).transpose()?,
        common_threshold: a.common_threshold,
    };
    let report = corpus_statistics(&examples, &options)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn read_run_file(path: Option<PathBuf>) -> anyhow::Result<RunFile> {
    let Some(path) = path.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) else {
        return Ok(RunFile::default());
    };
    let text = fs::read_to_string(&path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let run = read_run_file(a.config.clone())?;
    let data = load_prepared(&a.data)?;
    let limits = data.meta.limits;

    let mut model_cfg = run.model.unwrap_or_else(|| ModelConfig {
        vocab_size: data.vocab.len(),
        max_query_len: limits.max_query_len,
        max_passage_len: limits.max_passage_len,
        max_response_len: limits.max_response_len,
        ..ModelConfig::default()
    });
    macro_rules! set {
        ($target:ident, $($field:ident),*) => {
            $(if let Some(v) = a.$field { $target.$field = v; })*
        };
    }
    set!(model_cfg, hidden_size, num_heads, ffn_size, encoder_layers, fusion_layers, decoder_layers, dropout);
    if model_cfg.vocab_size != data.vocab.len() {
        bail!(UsageError(format!(
            "model vocab_size {} does not match the prepared vocabulary ({} entries)",
            model_cfg.vocab_size,
            data.vocab.len()
        )));
    }
    if model_cfg.max_query_len < limits.max_query_len
        || model_cfg.max_passage_len < limits.max_passage_len
        || model_cfg.max_response_len < limits.max_response_len
    {
        bail!(UsageError("model length limits are shorter than the prepared data".into()));
    }

    let mut train_cfg = run.train.unwrap_or_default();
    set!(
        train_cfg,
        peak_lr,
        warmup_steps,
        total_steps,
        clip_norm,
        ema_decay,
        lambda_rps,
        lambda_sti,
        lambda_rg,
        batch_size,
        seed
    );
    if let Some(w) = a.eval_weights {
        train_cfg.eval_weights = w.into();
    }
    train_cfg.disable_rps |= a.ablation.disable_rps;
    train_cfg.disable_sti |= a.ablation.disable_sti;
    train_cfg.plain_pointer |= a.ablation.plain_pointer;
    train_cfg.validate()?;
    if a.checkpoint_every == 0 {
        bail!(UsageError("--checkpoint-every must be positive".into()));
    }

    let special = data.vocab.special();
    let examples: Vec<TrainingExample> = data
        .records
        .iter()
        .map(|r| prepare_training_example(r.encoded.clone(), &data.frequencies, &train_cfg.weak_label_windows, &special))
        .collect::<Result<_, _>>()?;

    let seed = train_cfg.seed;
    let model = CaseModel::new(model_cfg, seed)?;
    let mut trainer = Trainer::new(model, train_cfg)?;
    save_checkpoint(&a.output_dir, &trainer, seed, &data.vocab)?;
    let log_path = a.log.unwrap_or_else(|| a.output_dir.join(TRAIN_LOG));
    let mut log = fs::File::create(&log_path).map_err(|e| DataError(format!("{}: {e}", log_path.display())))?;
    let every = a.checkpoint_every;
    let total = trainer.config.total_steps;
    eprintln!(
        "training {} parameters on {} examples for {total} steps",
        trainer.model.params.num_elements(),
        examples.len()
    );
    trainer.train(&examples, |entry, t| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        writeln!(log, "{line}").map_err(|e| CaseError::Input(format!("{}: {e}", log_path.display())))?;
        if entry.step % 50 == 0 || entry.step == total {
            eprintln!("step {} lr {:.3e} loss {:.4}", entry.step, entry.lr, entry.loss);
        }
        if entry.step % every == 0 || entry.step == total {
            save_checkpoint(&a.output_dir, t, seed, &data.vocab)?;
        }
        Ok(())
    })?;
    eprintln!("checkpoint written to {}", a.output_dir.display());
    Ok(())
}

struct Loaded {
    model: CaseModel,
    ablation: Ablation,
    data: Prepared,
    strategy: DecodeStrategy,
}

fn load_for_decoding(a: &DecodeArgs) -> anyhow::Result<Loaded> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_prepared(&a.data)?;
    ensure_vocabulary(&ckpt.config, &data.meta.vocab_id)
        .map_err(|e| DataError(format!("refusing to run: {e}")))?;
    let mut trainer = ckpt.trainer;
    if let Some(w) = a.weights {
        trainer.config.eval_weights = w.into();
    }
    let strategy = match a.strategy {
        StrategyArg::Greedy => DecodeStrategy::Greedy,
        StrategyArg::Beam if a.beam_size == 0 => bail!(UsageError("--beam-size must be positive".into())),
        StrategyArg::Beam => DecodeStrategy::Beam(a.beam_size),
    };
    Ok(Loaded {
        model: trainer.eval_model(),
        ablation: trainer.config.ablation(),
        data,
        strategy,
    })
}

fn hypothesis(l: &Loaded, r: &PreparedRecord) -> anyhow::Result<String> {
    let ids = l
        .model
        .generate(&r.encoded, &l.data.vocab.special(), l.ablation, l.strategy)
        .with_context(|| format!("generating for {}", r.encoded.key))?;
    Ok(l.data.vocab.decode(&ids))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let loaded = load_for_decoding(&a.decode)?;
    let mut generation = Vec::new();
    let mut ranking_scores = Vec::new();
    let mut ranking_lines = Vec::new();
    for r in &loaded.data.records {
        if !r.response.trim().is_empty() {
            generation.push(generation_scores(&hypothesis(&loaded, r)?, &r.response));
        }
        let scores = loaded.model.passage_scores(&r.encoded)?;
        let order: Vec<&str> = ranking(&scores).into_iter().map(|i| r.passage_ids[i].as_str()).collect();
        let relevant: HashSet<String> = r
            .passage_ids
            .iter()
            .zip(&r.encoded.relevance)
            .filter(|(_, &rel)| rel)
            .map(|(id, _)| id.clone())
            .collect();
        if !relevant.is_empty() {
            ranking_scores.push(ranking_metrics(&order, &relevant)?);
        }
        serde_json::to_writer(
            &mut ranking_lines,
            &serde_json::json!({"example": r.encoded.key, "ranking": order, "scores": scores}),
        )?;
        ranking_lines.push(b'\n');
    }
    let report = MetricsReport::aggregate(&generation, &ranking_scores).to_json();
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = a.output {
        write_atomic(&path, json.as_bytes())?;
    }
    if let Some(path) = a.ranking_output {
        write_atomic(&path, &ranking_lines)?;
    }
    eprintln!(
        "scored {} responses and {} rankings",
        generation.len(),
        ranking_scores.len()
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let loaded = load_for_decoding(&a.decode)?;
    let mut out = Vec::new();
    for r in &loaded.data.records {
        let line = serde_json::json!({
            "conversation_id": r.conversation_id,
            "turn_index": r.turn_index,
            "hypothesis": hypothesis(&loaded, r)?,
            "reference": r.response,
        });
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    write_atomic(&a.output, &out)?;
    eprintln!("wrote {} hypotheses to {}", loaded.data.records.len(), a.output.display());
    Ok(())
}
