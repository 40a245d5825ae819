//! Command-line surface tying the pipeline together: convert, train,
//! predict, evaluate, compare, and report. Errors exit nonzero with a
//! machine-readable JSON object on stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::convert::{self, QAPair, RankedAnswer, RankedAnswers};
use crate::corpus::{self, BioasqQuestion, QuestionType};
use crate::error::{Error, Result};
use crate::eval;
use crate::featurize::{encode_pairs, encode_squad_records, EncodeOptions, FeaturizedExample};
use crate::model::{ModelConfig, SpanBackend, SpanModel};
use crate::schedule::UnfreezeSchedule;
use crate::tokenize::{Tokenizer, ToyWordPiece};
use crate::train::{self, StageConfig, DEFAULT_MAX_ANSWER_LEN, DEFAULT_SEED, DEFAULT_TOP_K};

/// Directory tried as a fallback root for relative input paths.
pub const DATA_DIR_ENV: &str = "FACTOIDQA_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "factoidqa",
    version,
    about = "Factoid extractive QA: corpus conversion, staged fine-tuning, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert BioASQ questions into SQuAD-format question/snippet pairs.
    Convert(ConvertArgs),
    /// Run one or two fine-tuning stages from a JSON config.
    Train(TrainArgs),
    /// Decode span predictions and write a BioASQ submission.
    Predict(PredictArgs),
    /// Score a submission against gold annotations.
    Evaluate(EvaluateArgs),
    /// Paired t-test between two systems' per-batch scores.
    Compare(CompareArgs),
    /// Render per-batch scores as an aligned table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// BioASQ-style JSON file with a top-level `questions` array.
    #[arg(long)]
    input: PathBuf,
    /// SQuAD-format output path.
    #[arg(long)]
    output: PathBuf,
    /// Locate gold answers in each snippet and drop pairs without a match;
    /// without this flag every snippet converts unlabeled.
    #[arg(long)]
    labeled: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run config (see `TrainFileConfig`).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key override applied to the config, e.g.
    /// `--set stage2.learning_rate=1e-5`. Values parse as JSON when they
    /// can, otherwise as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed override; wins over the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override; wins over the config file.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file for the tokenizer.
    #[arg(long)]
    vocab: PathBuf,
    /// BioASQ-style JSON with the questions to answer.
    #[arg(long)]
    input: PathBuf,
    /// Where to write the per-pair span predictions JSON; defaults to
    /// `predictions.json` next to the submission file.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Where to write the BioASQ submission JSON.
    #[arg(long)]
    submission: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_seq_len: usize,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ANSWER_LEN)]
    max_answer_len: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// BioASQ submission JSON (factoid `exact_answer` lists are scored).
    #[arg(long)]
    submission: PathBuf,
    /// BioASQ gold JSON with reference `exact_answer` annotations.
    #[arg(long)]
    gold: PathBuf,
    /// Optional path for the full evaluation report JSON.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Comma-separated per-batch scores for the first system.
    #[arg(long)]
    a: String,
    /// Comma-separated per-batch scores for the second system.
    #[arg(long)]
    b: String,
    #[arg(long, default_value = "system-a")]
    name_a: String,
    #[arg(long, default_value = "system-b")]
    name_b: String,
    /// Significance threshold for the two-sided test.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// JSON file of shape {"batches": [...], "systems": {name: [scores]}}.
    #[arg(long)]
    scores: PathBuf,
    /// Optional path to also write the rendered table to.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Train run configuration file. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    /// Master seed; when absent the logged default 42 applies.
    #[serde(default)]
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub tokenizer: TokenizerSpec,
    /// Optional first stage (the large source corpus).
    #[serde(default)]
    pub stage1: Option<StageSpec>,
    /// The target-corpus stage.
    pub stage2: StageSpec,
    /// Start stage 2 from this checkpoint instead of a fresh model;
    /// only valid without `stage1`.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
}

/// Either load a saved vocabulary or build one from the training text.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    #[serde(default)]
    pub vocab_path: Option<PathBuf>,
    /// Build a vocabulary of this size from the stage datasets and save it
    /// to `out_dir/vocab.txt`.
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    Bioasq,
    Squad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    None,
    Gradual,
    Full,
}

/// Schedule selection for a stage; `gradual` sizes itself to the model's
/// layer count with groups of `group_size` (default 3).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub group_size: Option<usize>,
    #[serde(default)]
    pub freeze_embedding: Option<bool>,
}

/// One stage: a dataset plus a preset and/or explicit hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub dataset: PathBuf,
    pub format: DataFormat,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
}

/// Parses arguments, runs the selected command, and maps failures to exit
/// codes with an error JSON line on stderr.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": { "kind": err.kind(), "message": err.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::from(err.exit_code().clamp(1, 255) as u8)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Convert(args) => cmd_convert(args),
        Command::Train(args) => cmd_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Report(args) => cmd_report(args),
    }
}

/// Resolves an input path, falling back to `FACTOIDQA_DATA_DIR` for
/// relative paths that do not exist from the working directory.
fn resolve_input(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        let candidate = Path::new(&dir).join(path);
        if candidate.exists() {
            return candidate;
        }
    }
    path.to_path_buf()
}

fn cmd_convert(args: ConvertArgs) -> Result<()> {
    let input = resolve_input(&args.input);
    let questions = corpus::load_bioasq(&input)?;
    let factoid = corpus::filter_factoid(&questions);
    let report = convert::explode_all(&factoid, args.labeled)?;
    let squad = convert::to_squad(&report.pairs);
    corpus::write_squad(&squad, &args.output)?;

    let candidates = report.pairs.len() + report.dropped.len();
    println!("questions: {} ({} factoid)", questions.len(), factoid.len());
    if args.labeled {
        println!(
            "pairs: {} labeled (of {} candidates, {} dropped without a locatable answer)",
            report.pairs.len(),
            candidates,
            report.dropped.len()
        );
    } else {
        println!("pairs: {} unlabeled", report.pairs.len());
    }
    println!("wrote {}", args.output.display());
    Ok(())
}

/// Applies one `key=value` override to the parsed config JSON. Dotted keys
/// descend into objects, creating them as needed; the final typed
/// deserialization still rejects keys the config does not define.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not of the form KEY=VALUE")))?;
    if key.is_empty() {
        return Err(Error::config(format!("override {spec:?} has an empty key")));
    }
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cursor = root;
    for part in parts {
        let object = cursor.as_object_mut().ok_or_else(|| {
            Error::config(format!(
                "override {key:?} descends into a non-object at {part:?}"
            ))
        })?;
        cursor = object
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let object = cursor
        .as_object_mut()
        .ok_or_else(|| Error::config(format!("override {key:?} targets a non-object parent")))?;
    object.insert(last.to_string(), value);
    Ok(())
}

fn load_train_config(args: &TrainArgs) -> Result<TrainFileConfig> {
    let path = resolve_input(&args.config);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    for spec in &args.overrides {
        apply_override(&mut value, spec)?;
    }
    let mut config: TrainFileConfig = serde_json::from_value(value)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;

    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    if config.seed.is_none() {
        eprintln!("seed not specified; using default {DEFAULT_SEED}");
        config.seed = Some(DEFAULT_SEED);
    }
    if let Some(out_dir) = &args.out_dir {
        config.out_dir = out_dir.clone();
    }
    if config.stage1.is_some() && config.init_checkpoint.is_some() {
        return Err(Error::config(
            "init_checkpoint only applies to single-stage runs; drop stage1 or the checkpoint",
        ));
    }
    Ok(config)
}

/// Loads a stage dataset as labeled pairs ready for featurization.
fn load_stage_pairs(spec: &StageSpec) -> Result<Vec<QAPair>> {
    let path = resolve_input(&spec.dataset);
    match spec.format {
        DataFormat::Bioasq => {
            let questions = corpus::load_bioasq(&path)?;
            let factoid = corpus::filter_factoid(&questions);
            let report = convert::explode_all(&factoid, true)?;
            if !report.dropped.is_empty() {
                eprintln!(
                    "{}: dropped {} pairs without a locatable answer",
                    path.display(),
                    report.dropped.len()
                );
            }
            Ok(report.pairs)
        }
        DataFormat::Squad => {
            // SQuAD records featurize directly; wrap them as pairs only for
            // vocabulary building.
            let records = corpus::load_squad(&path)?;
            Ok(records
                .into_iter()
                .map(|qa| QAPair {
                    pair_id: qa.id.clone(),
                    question_id: qa.id,
                    question: qa.question,
                    passage: qa.context,
                    gold: None,
                })
                .collect())
        }
    }
}

fn featurize_stage(
    spec: &StageSpec,
    cfg: &StageConfig,
    tokenizer: &ToyWordPiece,
) -> Result<Vec<FeaturizedExample>> {
    let path = resolve_input(&spec.dataset);
    let opts = EncodeOptions::with_max_seq_len(cfg.max_seq_len);
    let batch = match spec.format {
        DataFormat::Bioasq => {
            let questions = corpus::load_bioasq(&path)?;
            let factoid = corpus::filter_factoid(&questions);
            let report = convert::explode_all(&factoid, true)?;
            encode_pairs(&report.pairs, tokenizer, &opts)?
        }
        DataFormat::Squad => {
            let records = corpus::load_squad(&path)?;
            encode_squad_records(&records, tokenizer, &opts)?
        }
    };
    if !batch.dropped.is_empty() {
        eprintln!(
            "{}: dropped {} examples whose gold span fell outside the {}-token window",
            path.display(),
            batch.dropped.len(),
            cfg.max_seq_len
        );
    }
    let (labeled, unlabeled): (Vec<_>, Vec<_>) = batch
        .examples
        .into_iter()
        .partition(|e| e.gold_span.is_some());
    if !unlabeled.is_empty() {
        eprintln!(
            "{}: skipping {} unlabeled examples (training needs gold spans)",
            path.display(),
            unlabeled.len()
        );
    }
    if labeled.is_empty() {
        return Err(Error::validation(format!(
            "{}: no trainable examples after featurization",
            path.display()
        )));
    }
    Ok(labeled)
}

/// Resolves a stage spec into a concrete config: preset defaults, explicit
/// overrides, then the schedule choice sized to the model depth.
fn resolve_stage(spec: &StageSpec, num_layers: usize, seed: u64) -> Result<StageConfig> {
    let mut cfg = train::preset(spec.preset.as_deref().unwrap_or("albert1"), num_layers)?;
    cfg.dataset = spec.dataset.display().to_string();
    cfg.seed = seed;
    if let Some(v) = spec.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = spec.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = spec.max_seq_len {
        cfg.max_seq_len = v;
    }
    if let Some(v) = spec.epochs {
        cfg.epochs = v;
    }
    if let Some(schedule) = &spec.schedule {
        match schedule.kind {
            ScheduleKind::None => {
                if schedule.group_size.is_some() || schedule.freeze_embedding.is_some() {
                    return Err(Error::config(
                        "schedule kind \"none\" takes no group_size or freeze_embedding",
                    ));
                }
                cfg.schedule = None;
            }
            ScheduleKind::Gradual => {
                let group_size = schedule.group_size.unwrap_or(3);
                let freeze = schedule.freeze_embedding.unwrap_or(true);
                let built = UnfreezeSchedule::gradual_top_down(num_layers, group_size, freeze)?;
                if spec.epochs.is_none() {
                    cfg.epochs = built.num_epochs();
                }
                cfg.schedule = Some(built);
            }
            ScheduleKind::Full => {
                if schedule.group_size.is_some() {
                    return Err(Error::config("schedule kind \"full\" takes no group_size"));
                }
                let freeze = schedule.freeze_embedding.unwrap_or(false);
                cfg.schedule = Some(UnfreezeSchedule::full_finetune(
                    num_layers, cfg.epochs, freeze,
                )?);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn obtain_tokenizer(config: &TrainFileConfig, stage_pairs: &[&[QAPair]]) -> Result<ToyWordPiece> {
    match (&config.tokenizer.vocab_path, config.tokenizer.vocab_size) {
        (Some(path), None) => ToyWordPiece::load_vocab(resolve_input(path)),
        (None, Some(size)) => {
            let mut lines = Vec::new();
            for pairs in stage_pairs {
                for pair in *pairs {
                    lines.push(pair.question.as_str());
                    lines.push(pair.passage.as_str());
                }
            }
            let tokenizer = ToyWordPiece::build(&lines, size)?;
            std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
            let saved = config.out_dir.join("vocab.txt");
            tokenizer.save_vocab(&saved)?;
            eprintln!(
                "built vocabulary of {} entries at {}",
                tokenizer.vocab_size(),
                saved.display()
            );
            Ok(tokenizer)
        }
        (Some(_), Some(_)) => Err(Error::config(
            "tokenizer takes either vocab_path or vocab_size, not both",
        )),
        (None, None) => Err(Error::config(
            "tokenizer needs a vocab_path to load or a vocab_size to build",
        )),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = load_train_config(&args)?;
    let seed = config.seed.expect("seed resolved by load_train_config");
    eprintln!("master seed: {seed}");

    let stage2_pairs = load_stage_pairs(&config.stage2)?;
    let stage1_pairs = match &config.stage1 {
        Some(spec) => Some(load_stage_pairs(spec)?),
        None => None,
    };
    let mut pair_slices: Vec<&[QAPair]> = vec![&stage2_pairs];
    if let Some(pairs) = &stage1_pairs {
        pair_slices.push(pairs);
    }
    let tokenizer = obtain_tokenizer(&config, &pair_slices)?;
    if tokenizer.vocab_size() > config.model.vocab_size {
        return Err(Error::config(format!(
            "tokenizer has {} entries but the model embeds only {}",
            tokenizer.vocab_size(),
            config.model.vocab_size
        )));
    }

    std::fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    let echo_path = config.out_dir.join("config.resolved.json");
    let echo = serde_json::to_string_pretty(&config)
        .map_err(|e| Error::validation(format!("serializing resolved config: {e}")))?;
    std::fs::write(&echo_path, echo).map_err(|e| Error::io(&echo_path, e))?;

    let stage2_cfg = resolve_stage(&config.stage2, config.model.num_layers, seed)?;
    let stage2_data = featurize_stage(&config.stage2, &stage2_cfg, &tokenizer)?;

    let final_checkpoint = match (&config.stage1, stage1_pairs) {
        (Some(spec), Some(_)) => {
            let stage1_cfg = resolve_stage(spec, config.model.num_layers, seed)?;
            let stage1_data = featurize_stage(spec, &stage1_cfg, &tokenizer)?;
            let report = train::two_stage(
                &config.model,
                (&stage1_data, &stage1_cfg),
                (&stage2_data, &stage2_cfg),
                &config.out_dir,
            )?;
            report.final_checkpoint
        }
        _ => {
            let mut model = match &config.init_checkpoint {
                Some(path) => {
                    let mut model = SpanModel::load(resolve_input(path))?;
                    if *model.config() != config.model {
                        return Err(Error::config(format!(
                            "checkpoint {} was trained with a different model shape",
                            path.display()
                        )));
                    }
                    model.reset_optimizer();
                    model
                }
                None => SpanModel::new(config.model.clone(), seed)?,
            };
            let manifest = train::run_stage(
                &mut model,
                &stage2_data,
                &stage2_cfg,
                &config.out_dir.join("stage2"),
                1,
            )?;
            manifest.final_checkpoint
        }
    };
    println!("final checkpoint: {}", final_checkpoint.display());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let model = SpanModel::load(resolve_input(&args.checkpoint))?;
    let tokenizer = ToyWordPiece::load_vocab(resolve_input(&args.vocab))?;
    let questions = corpus::load_bioasq(resolve_input(&args.input))?;
    let factoid = corpus::filter_factoid(&questions);
    let report = convert::explode_all(&factoid, false)?;

    let opts = EncodeOptions::with_max_seq_len(args.max_seq_len);
    let batch = encode_pairs(&report.pairs, &tokenizer, &opts)?;
    let predictions = train::predict(&model, &batch.examples, args.max_answer_len, args.top_k)?;

    let predictions_path = args
        .predictions
        .clone()
        .unwrap_or_else(|| args.submission.with_file_name("predictions.json"));
    let text = serde_json::to_string_pretty(&predictions)
        .map_err(|e| Error::validation(format!("serializing predictions: {e}")))?;
    std::fs::write(&predictions_path, text).map_err(|e| Error::io(&predictions_path, e))?;

    let pair_to_question: BTreeMap<String, String> = report
        .pairs
        .iter()
        .map(|p| (p.pair_id.clone(), p.question_id.clone()))
        .collect();
    let ranked = convert::aggregate(&predictions, &pair_to_question)?;
    let submission = convert::emit_submission(&ranked, &questions)?;
    corpus::write_bioasq(&submission, &args.submission)?;

    println!(
        "questions: {} ({} factoid), pairs: {}, answered: {}",
        questions.len(),
        factoid.len(),
        batch.examples.len(),
        ranked.len()
    );
    println!(
        "wrote {} and {}",
        args.submission.display(),
        predictions_path.display()
    );
    Ok(())
}

/// Reads ranked answers back out of a BioASQ submission: each factoid
/// question's synonym groups become the ranked list, first synonym per
/// group.
fn submission_answers(questions: &[BioasqQuestion]) -> Vec<RankedAnswers> {
    let mut out = Vec::new();
    for question in questions {
        if question.question_type != QuestionType::Factoid {
            continue;
        }
        let answers = question
            .exact_answer
            .as_ref()
            .map(|groups| {
                groups
                    .0
                    .iter()
                    .filter_map(|group| group.first())
                    .enumerate()
                    .map(|(i, text)| RankedAnswer {
                        text: text.clone(),
                        probability: 1.0 / (i + 1) as f64,
                    })
                    .collect()
            })
            .unwrap_or_default();
        out.push(RankedAnswers {
            question_id: question.id.clone(),
            answers,
        });
    }
    out
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let submitted = corpus::load_bioasq(resolve_input(&args.submission))?;
    let gold_questions = corpus::load_bioasq(resolve_input(&args.gold))?;
    let gold = eval::gold_from_questions(&gold_questions)?;
    let submissions = submission_answers(&submitted);
    let report = eval::evaluate(&submissions, &gold)?;

    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    println!("{}", report.summary_json());
    if let Some(path) = &args.output {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::validation(format!("serializing report: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_scores(raw: &str, flag: &str) -> Result<Vec<f64>> {
    let scores: std::result::Result<Vec<f64>, _> =
        raw.split(',').map(|s| s.trim().parse::<f64>()).collect();
    scores.map_err(|e| Error::config(format!("--{flag} {raw:?}: {e}")))
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::config(format!(
            "alpha must lie in (0, 1), got {}",
            args.alpha
        )));
    }
    let xs = parse_scores(&args.a, "a")?;
    let ys = parse_scores(&args.b, "b")?;
    let result = eval::paired_t_test(&xs, &ys)?;
    let significant = result.p < args.alpha;
    println!(
        "{}",
        serde_json::json!({
            "t": result.t,
            "df": result.df,
            "p": result.p,
            "alpha": args.alpha,
            "significant": significant,
        })
    );
    println!(
        "difference between {} and {} is {} at {}",
        args.name_a,
        args.name_b,
        if significant {
            "significant"
        } else {
            "not significant"
        },
        args.alpha
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreFile {
    batches: Vec<String>,
    systems: BTreeMap<String, Vec<f64>>,
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let path = resolve_input(&args.scores);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let scores: ScoreFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let systems: Vec<(String, Vec<f64>)> = scores.systems.into_iter().collect();
    let table = eval::format_mrr_table(&systems, &scores.batches)?;
    print!("{table}");
    if let Some(output) = &args.output {
        std::fs::write(output, &table).map_err(|e| Error::io(output, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_descend_and_replace() {
        let mut value = serde_json::json!({
            "stage2": { "learning_rate": 3e-5 },
            "seed": 1,
        });
        apply_override(&mut value, "stage2.learning_rate=1e-4").unwrap();
        apply_override(&mut value, "stage2.preset=albert2").unwrap();
        apply_override(&mut value, "seed=9").unwrap();
        assert_eq!(value["stage2"]["learning_rate"], 1e-4);
        assert_eq!(value["stage2"]["preset"], "albert2");
        assert_eq!(value["seed"], 9);

        // Values that fail to parse as JSON become strings.
        apply_override(&mut value, "stage2.dataset=data/train.json").unwrap();
        assert_eq!(value["stage2"]["dataset"], "data/train.json");

        assert!(apply_override(&mut value, "no-equals-sign").is_err());
        assert!(apply_override(&mut value, "=x").is_err());
        assert!(apply_override(&mut value, "seed.nested=1").is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let raw = serde_json::json!({
            "out_dir": "runs/x",
            "model": {
                "vocab_size": 32, "max_positions": 16, "hidden": 8,
                "num_layers": 2, "num_heads": 2, "ffn_dim": 16
            },
            "tokenizer": { "vocab_size": 32 },
            "stage2": { "dataset": "d.json", "format": "bioasq" },
            "typo_key": true,
        });
        let err = serde_json::from_value::<TrainFileConfig>(raw).unwrap_err();
        assert!(err.to_string().contains("typo_key"));

        let raw = serde_json::json!({
            "out_dir": "runs/x",
            "model": {
                "vocab_size": 32, "max_positions": 16, "hidden": 8,
                "num_layers": 2, "num_heads": 2, "ffn_dim": 16
            },
            "tokenizer": { "vocab_size": 32 },
            "stage2": { "dataset": "d.json", "format": "bioasq", "lr": 1.0 },
        });
        let err = serde_json::from_value::<TrainFileConfig>(raw).unwrap_err();
        assert!(err.to_string().contains("lr"));
    }

    #[test]
    fn documented_two_stage_config_deserializes_and_resolves() {
        // The README's example config, kept in sync by this test.
        let raw = serde_json::json!({
            "seed": 42,
            "out_dir": "runs/albert1",
            "model": {
                "vocab_size": 30000,
                "max_positions": 512,
                "hidden": 768,
                "num_layers": 6,
                "num_heads": 12,
                "ffn_dim": 3072
            },
            "tokenizer": { "vocab_size": 30000 },
            "stage1": {
                "dataset": "squad-train.json",
                "format": "squad",
                "preset": "albert1",
                "epochs": 2
            },
            "stage2": {
                "dataset": "bioasq-train.json",
                "format": "bioasq",
                "preset": "albert1",
                "schedule": { "kind": "gradual", "group_size": 2, "freeze_embedding": true }
            }
        });
        let config: TrainFileConfig = serde_json::from_value(raw).unwrap();
        config.model.validate().unwrap();
        let layers = config.model.num_layers;
        let stage1 = resolve_stage(config.stage1.as_ref().unwrap(), layers, 42).unwrap();
        assert_eq!(stage1.epochs, 2);
        assert!(stage1.schedule.is_none());
        let stage2 = resolve_stage(&config.stage2, layers, 42).unwrap();
        let schedule = stage2.schedule.as_ref().unwrap();
        assert_eq!(stage2.epochs, schedule.num_epochs());
    }

    #[test]
    fn stage_resolution_layers_presets_overrides_and_schedules() {
        let spec = StageSpec {
            dataset: PathBuf::from("d.json"),
            format: DataFormat::Bioasq,
            preset: Some("albert2".to_string()),
            learning_rate: None,
            batch_size: Some(2),
            max_seq_len: Some(64),
            epochs: None,
            schedule: None,
        };
        let cfg = resolve_stage(&spec, 6, 5).unwrap();
        assert_eq!(cfg.learning_rate, 2e-5);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.max_seq_len, 64);
        assert_eq!(cfg.epochs, 4);
        assert_eq!(cfg.seed, 5);

        let gradual = StageSpec {
            preset: None,
            schedule: Some(ScheduleSpec {
                kind: ScheduleKind::Gradual,
                group_size: Some(2),
                freeze_embedding: None,
            }),
            ..spec.clone()
        };
        let cfg = resolve_stage(&gradual, 6, 5).unwrap();
        assert_eq!(cfg.epochs, 4);
        assert_eq!(cfg.schedule.as_ref().unwrap().num_epochs(), 4);

        let disabled = StageSpec {
            preset: Some("distilbert-unfreeze".to_string()),
            schedule: Some(ScheduleSpec {
                kind: ScheduleKind::None,
                group_size: None,
                freeze_embedding: None,
            }),
            ..spec.clone()
        };
        let cfg = resolve_stage(&disabled, 6, 5).unwrap();
        assert!(cfg.schedule.is_none());

        let contradictory = StageSpec {
            schedule: Some(ScheduleSpec {
                kind: ScheduleKind::None,
                group_size: Some(3),
                freeze_embedding: None,
            }),
            ..spec
        };
        assert!(resolve_stage(&contradictory, 6, 5).is_err());
    }

    #[test]
    fn score_lists_parse_or_fail_loudly() {
        assert_eq!(
            parse_scores("0.1, 0.2,0.3", "a").unwrap(),
            vec![0.1, 0.2, 0.3]
        );
        let err = parse_scores("0.1,abc", "b").unwrap_err();
        assert!(err.to_string().contains("--b"));
    }

    #[test]
    fn data_dir_fallback_only_fires_for_missing_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let inner = dir.path().join("present.json");
        std::fs::write(&inner, "{}").unwrap();

        // An absolute path is returned untouched.
        assert_eq!(resolve_input(&inner), inner);

        // A missing relative path stays as-is without the env fallback; the
        // env var itself is process-global, so only exercise the non-env
        // branches here.
        let missing = PathBuf::from("definitely/not/here.json");
        assert_eq!(resolve_input(&missing), missing);
    }
}
