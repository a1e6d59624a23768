//! Command-line surface: data generation, training, decoding, evaluation,
//! the gradient audit, experiment harnesses, and training-curve export.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, malformed or unknown
//! config keys, missing required values), 2 runtime failure. Every flag has
//! a config-file twin under the same kebab-case name (`--config file.json`,
//! a flat JSON object); an explicit flag wins over the file.

use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::data::{
    apply_answer_vocab, build_answer_vocab, detokenize, generate_scene, read_dataset,
    write_dataset, AnswerVocab, DataError, GrammarSpec, SceneExample, Vocab,
};
use crate::experiments::{
    caption_transfer, region_label_ablation, vqa_transfer, AblationConfig, TransferConfig,
};
use crate::infer::{caption_scene, caption_scene_beam, vqa_predict, InferError};
use crate::mask::Objective;
use crate::metrics::{bleu4, qa_accuracy, EvalReport, ExampleRecord, MetricsError};
use crate::model::ModelConfig;
use crate::train::{
    check_config_compat, finetune_caption, finetune_vqa, load_checkpoint, masked_lm_fd_max_err,
    pretrain, CheckpointSink, CorruptionConfig, ModelWeights, TrainConfig, TrainError, TrainLog,
};
use crate::{embed::RegionPositional, tensor::TensorError};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: wrong flags, malformed config, missing inputs the
    /// user must name. Exit code 1.
    Usage(String),
    /// Anything that went wrong while doing the work. Exit code 2.
    Data(DataError),
    Train(TrainError),
    Infer(InferError),
    Metrics(MetricsError),
    Tensor(TensorError),
    Failed(String),
    Io { path: PathBuf, source: std::io::Error },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Train(e) => write!(f, "{e}"),
            CliError::Infer(e) => write!(f, "{e}"),
            CliError::Metrics(e) => write!(f, "{e}"),
            CliError::Tensor(e) => write!(f, "{e}"),
            CliError::Failed(m) => write!(f, "{m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}
impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        CliError::Infer(e)
    }
}
impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Metrics(e)
    }
}
impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Tensor(e)
    }
}
impl From<crate::train::CheckpointError> for CliError {
    fn from(e: crate::train::CheckpointError) -> Self {
        CliError::Train(TrainError::from(e))
    }
}

/// Entry point behind `main`: parses, dispatches, maps errors to exit
/// codes.
pub fn run() -> i32 {
    let argv: Vec<std::ffi::OsString> = std::env::args_os().collect();
    run_from(argv)
}

/// Testable entry point over explicit argv.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "uvlp",
    version,
    about = "Unified vision-language transformer: synthetic scenes, masked-LM training, captioning, and QA"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic scene dataset (JSON lines).
    GenData(GenDataArgs),
    /// Pre-train the trunk under alternating masked-LM objectives.
    Pretrain(PretrainArgs),
    /// Fine-tune for captioning (pure seq2seq masked-LM).
    FinetuneCaption(FinetuneArgs),
    /// Fine-tune the answer head (bidirectional, sigmoid BCE).
    FinetuneVqa(FinetuneVqaArgs),
    /// Decode captions for every scene in a dataset.
    Caption(CaptionArgs),
    /// Answer every question in a dataset.
    Vqa(VqaArgs),
    /// Score captions (BLEU@4, exact match) or answers (accuracy).
    Eval(EvalArgs),
    /// Audit analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Merge training logs into one step-aligned comparison CSV.
    Curves(CurvesArgs),
    /// Pre-trained vs. from-scratch fine-tuning comparison.
    Transfer(TransferArgs),
    /// Region-label pretext vs. input ablation.
    Ablation(AblationArgs),
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Pretrain(a) => cmd_pretrain(a),
        Cmd::FinetuneCaption(a) => cmd_finetune_caption(a),
        Cmd::FinetuneVqa(a) => cmd_finetune_vqa(a),
        Cmd::Caption(a) => cmd_caption(a),
        Cmd::Vqa(a) => cmd_vqa(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::Curves(a) => cmd_curves(a),
        Cmd::Transfer(a) => cmd_transfer(a),
        Cmd::Ablation(a) => cmd_ablation(a),
    }
}

// ---------------------------------------------------------------------------
// Config-file twins.

/// Flat JSON config: every flag can instead appear as a key of the same
/// kebab-case name. Reads are tracked so unknown keys can be rejected.
struct FileCfg {
    map: serde_json::Map<String, Value>,
    used: HashSet<String>,
    path: Option<PathBuf>,
}

impl FileCfg {
    fn load(path: Option<&PathBuf>) -> Result<FileCfg, CliError> {
        let Some(path) = path else {
            return Ok(FileCfg {
                map: serde_json::Map::new(),
                used: HashSet::new(),
                path: None,
            });
        };
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::Usage(format!(
                "config {} must be a flat JSON object",
                path.display()
            )));
        };
        Ok(FileCfg {
            map,
            used: HashSet::new(),
            path: Some(path.clone()),
        })
    }

    fn wrong_type(&self, key: &str, want: &str) -> CliError {
        CliError::Usage(format!("config key \"{key}\" must be a {want}"))
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>, CliError> {
        self.used.insert(key.to_string());
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| self.wrong_type(key, "nonnegative integer")),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>, CliError> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        self.used.insert(key.to_string());
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_f64()
                .map(Some)
                .ok_or_else(|| self.wrong_type(key, "number")),
        }
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>, CliError> {
        self.used.insert(key.to_string());
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_bool()
                .map(Some)
                .ok_or_else(|| self.wrong_type(key, "boolean")),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, CliError> {
        self.used.insert(key.to_string());
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| Some(s.to_string()))
                .ok_or_else(|| self.wrong_type(key, "string")),
        }
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>, CliError> {
        Ok(self.string(key)?.map(PathBuf::from))
    }

    /// Rejects keys no flag of this subcommand claimed — silent typos in a
    /// config file are worse than an error.
    fn reject_unknown(&self) -> Result<(), CliError> {
        let unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            return Ok(());
        }
        let where_ = self
            .path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        Err(CliError::Usage(format!(
            "unknown config keys in {where_}: {}",
            unknown
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )))
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// SetTrue flags cannot say "explicitly false", so the flag only wins when
/// set.
fn pick_flag(flag: bool, file: Option<bool>) -> bool {
    flag || file.unwrap_or(false)
}

fn require<T>(value: Option<T>, what: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required {what}")))
}

fn load_grammar(path: Option<&PathBuf>) -> Result<GrammarSpec, CliError> {
    let Some(path) = path else {
        return Ok(GrammarSpec::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    let spec: GrammarSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("grammar {}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// Writes lines to `--out` (atomically) or stdout.
fn emit_lines(lines: &[String], out: Option<&PathBuf>) -> Result<(), CliError> {
    match out {
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for line in lines {
                writeln!(lock, "{line}").map_err(|source| CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })?;
            }
            Ok(())
        }
        Some(path) => {
            let io = |source| CliError::Io {
                path: path.clone(),
                source,
            };
            let tmp = path.with_extension("tmp");
            let mut body = lines.join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            std::fs::write(&tmp, body).map_err(|source| CliError::Io {
                path: tmp.clone(),
                source,
            })?;
            std::fs::rename(&tmp, path).map_err(io)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared flag groups.

#[derive(Args, Debug)]
struct ModelFlags {
    /// Transformer layer count.
    #[arg(long)]
    layers: Option<usize>,
    /// Hidden width d.
    #[arg(long)]
    dim: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    heads: Option<usize>,
    /// Feed-forward inner width.
    #[arg(long)]
    ffn: Option<usize>,
    /// Region slots per scene.
    #[arg(long)]
    regions: Option<usize>,
    /// Text window length.
    #[arg(long)]
    window: Option<usize>,
    /// Train-time dropout rate.
    #[arg(long)]
    dropout: Option<f64>,
    /// Positional rows for region columns: none | global.
    #[arg(long)]
    region_positional: Option<String>,
    /// Zero the detector class distributions at the input branch.
    #[arg(long)]
    no_class_input: bool,
}

struct ResolvedModel {
    config: ModelConfig,
    /// Keys the user explicitly set (flag or file) — used to validate
    /// against a loaded checkpoint.
    explicit: bool,
}

impl ModelFlags {
    fn resolve(&self, cfg: &mut FileCfg, vocab: &Vocab, grammar: &GrammarSpec) -> Result<ResolvedModel, CliError> {
        let desk = ModelConfig::desk(vocab.len());
        let layers = pick(self.layers, cfg.usize("layers")?, desk.layers);
        let dim = pick(self.dim, cfg.usize("dim")?, desk.d);
        let heads = pick(self.heads, cfg.usize("heads")?, desk.heads);
        let ffn = pick(self.ffn, cfg.usize("ffn")?, desk.ffn);
        let regions = pick(self.regions, cfg.usize("regions")?, desk.n);
        let window = pick(self.window, cfg.usize("window")?, desk.t);
        let dropout = pick(self.dropout, cfg.f64("dropout")?, desk.dropout);
        let positional_name = pick(
            self.region_positional.clone(),
            cfg.string("region-positional")?,
            "none".to_string(),
        );
        let region_positional = match positional_name.as_str() {
            "none" => RegionPositional::None,
            "global" => RegionPositional::Global,
            other => {
                return Err(CliError::Usage(format!(
                    "--region-positional must be none or global, got {other}"
                )))
            }
        };
        let no_class_input = pick_flag(self.no_class_input, cfg.bool("no-class-input")?);
        let explicit = self.layers.is_some()
            || self.dim.is_some()
            || self.heads.is_some()
            || self.ffn.is_some()
            || self.regions.is_some()
            || self.window.is_some()
            || ["layers", "dim", "heads", "ffn", "regions", "window"]
                .iter()
                .any(|k| cfg.map.contains_key(*k));
        let config = ModelConfig {
            layers,
            d: dim,
            heads,
            ffn,
            vocab: vocab.len(),
            d_in: grammar.feature_dim(),
            classes: grammar.classes.len(),
            n: regions,
            t: window,
            max_u: regions + window + 3,
            dropout,
            region_positional,
            class_input: !no_class_input,
        };
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(ResolvedModel { config, explicit })
    }
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Examples per step.
    #[arg(long)]
    batch: Option<usize>,
    /// Peak Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup steps.
    #[arg(long)]
    warmup: Option<usize>,
    /// Global gradient-norm cap.
    #[arg(long)]
    clip: Option<f64>,
    /// Seeds data order, corruption, and fresh weights.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Allow masked-LM windows with no selected position (strict
    /// independent 15% selection, no redraw).
    #[arg(long)]
    strict_bert_masking: bool,
    /// Write the per-step training log CSV here.
    #[arg(long)]
    curve: Option<PathBuf>,
}

struct ResolvedTrain {
    config: TrainConfig,
    curve: Option<PathBuf>,
}

impl TrainFlags {
    fn resolve(&self, cfg: &mut FileCfg, default_steps: u64) -> Result<ResolvedTrain, CliError> {
        let mut t = TrainConfig::desk();
        t.steps = pick(self.steps, cfg.u64("steps")?, default_steps);
        t.batch_size = pick(self.batch, cfg.usize("batch")?, t.batch_size);
        t.adam.lr = pick(self.lr, cfg.f64("lr")?, t.adam.lr);
        t.adam.warmup = pick(self.warmup, cfg.usize("warmup")?, t.adam.warmup);
        t.clip = pick(self.clip, cfg.f64("clip")?, t.clip);
        t.seed = pick(self.seed, cfg.u64("seed")?, t.seed);
        t.checkpoint_every = self.checkpoint_every.or(cfg.u64("checkpoint-every")?);
        t.corruption.force_nonempty =
            !pick_flag(self.strict_bert_masking, cfg.bool("strict-bert-masking")?);
        let curve = self.curve.clone().or(cfg.path("curve")?);
        Ok(ResolvedTrain { config: t, curve })
    }
}

fn write_curve(log: &TrainLog, curve: Option<&PathBuf>) -> Result<(), CliError> {
    if let Some(path) = curve {
        log.write_csv(path)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First scene seed; scene i uses seed+i.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of scenes.
    #[arg(long)]
    scenes: Option<usize>,
    /// Output dataset path (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grammar JSON file (defaults to the built-in grammar).
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Feature/logit noise scale.
    #[arg(long)]
    noise: Option<f64>,
    /// Region slots per scene.
    #[arg(long)]
    regions: Option<usize>,
    /// Answer vocabulary size for QA labels.
    #[arg(long)]
    answers: Option<usize>,
}

fn cmd_gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let seed = pick(a.seed, cfg.u64("seed")?, 1);
    let scenes = pick(a.scenes, cfg.usize("scenes")?, 200);
    let out = require(a.out.or(cfg.path("out")?), "--out")?;
    let grammar_path = a.grammar.or(cfg.path("grammar")?);
    let noise = pick(a.noise, cfg.f64("noise")?, 0.02);
    let regions = pick(a.regions, cfg.usize("regions")?, 8);
    let answers = pick(a.answers, cfg.usize("answers")?, 32);
    cfg.reject_unknown()?;

    let grammar = load_grammar(grammar_path.as_ref())?;
    let mut examples: Vec<SceneExample> = (0..scenes)
        .map(|i| generate_scene(seed + i as u64, &grammar, regions, noise))
        .collect::<Result<_, _>>()?;
    let vocab = build_answer_vocab(&mut examples, answers);
    write_dataset(&examples, &out)?;
    println!(
        "wrote {} scenes ({} distinct answers) to {}",
        examples.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grammar JSON file (must match the dataset).
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Per-batch seq2seq proportion.
    #[arg(long)]
    lambda: Option<f64>,
    /// Add the region-label pretext loss.
    #[arg(long)]
    region_pretext: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let data = require(a.data.or(cfg.path("data")?), "--data")?;
    let out = require(a.out.or(cfg.path("out")?), "--out")?;
    let grammar_path = a.grammar.or(cfg.path("grammar")?);
    let lambda = pick(a.lambda, cfg.f64("lambda")?, 0.75);
    let region_pretext = pick_flag(a.region_pretext, cfg.bool("region-pretext")?);

    let grammar = load_grammar(grammar_path.as_ref())?;
    let vocab = Vocab::from_grammar(&grammar);
    let model = a.model.resolve(&mut cfg, &vocab, &grammar)?;
    let train = a.train.resolve(&mut cfg, 1000)?;
    cfg.reject_unknown()?;

    let dataset = read_dataset(&data)?;
    let mut tc = train.config;
    tc.lambda = lambda;
    tc.region_pretext = region_pretext;
    let mut weights = ModelWeights::init(&model.config, tc.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let sink = CheckpointSink {
        path: &out,
        answers: None,
    };
    let log = pretrain(&mut weights, &dataset, &vocab, &tc, Some(sink))?;
    write_curve(&log, train.curve.as_ref())?;
    let last = log.records.last().expect("at least one step");
    println!(
        "pretrained {} steps ({} seq2seq); final loss {:.4}; checkpoint {}",
        log.records.len(),
        log.seq2seq_steps(),
        last.loss,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// finetune-caption / finetune-vqa

/// Loads the starting weights: a checkpoint when `--init` is given
/// (validating any explicitly requested shape against it), else fresh
/// weights from the resolved model config.
fn starting_weights(
    init: Option<&PathBuf>,
    model: &ResolvedModel,
    vocab: &Vocab,
    seed: u64,
) -> Result<(ModelWeights, Option<AnswerVocab>), CliError> {
    match init {
        None => {
            let weights = ModelWeights::init(&model.config, seed)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok((weights, None))
        }
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if model.explicit {
                check_config_compat(&model.config, &loaded.weights.config)?;
            }
            if loaded.weights.config.vocab != vocab.len() {
                return Err(CliError::Usage(format!(
                    "checkpoint vocabulary ({}) does not match the grammar's ({})",
                    loaded.weights.config.vocab,
                    vocab.len()
                )));
            }
            Ok((loaded.weights, loaded.answers))
        }
    }
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Starting checkpoint; omit to fine-tune from fresh weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grammar JSON file (must match the dataset).
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn cmd_finetune_caption(a: FinetuneArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let data = require(a.data.or(cfg.path("data")?), "--data")?;
    let out = require(a.out.or(cfg.path("out")?), "--out")?;
    let grammar_path = a.grammar.or(cfg.path("grammar")?);
    let init = a.init.or(cfg.path("init")?);

    let grammar = load_grammar(grammar_path.as_ref())?;
    let vocab = Vocab::from_grammar(&grammar);
    let model = a.model.resolve(&mut cfg, &vocab, &grammar)?;
    let train = a.train.resolve(&mut cfg, 500)?;
    cfg.reject_unknown()?;

    let dataset = read_dataset(&data)?;
    let (mut weights, answers) = starting_weights(init.as_ref(), &model, &vocab, train.config.seed)?;
    let sink = CheckpointSink {
        path: &out,
        answers: answers.as_ref(),
    };
    let log = finetune_caption(&mut weights, &dataset, &vocab, &train.config, Some(sink))?;
    write_curve(&log, train.curve.as_ref())?;
    let last = log.records.last().expect("at least one step");
    println!(
        "fine-tuned {} steps; final loss {:.4}; checkpoint {}",
        log.records.len(),
        last.loss,
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
struct FinetuneVqaArgs {
    #[command(flatten)]
    base: FinetuneArgs,
    /// Answer vocabulary size (top-k by frequency over the dataset).
    #[arg(long)]
    answers: Option<usize>,
}

fn cmd_finetune_vqa(a: FinetuneVqaArgs) -> Result<(), CliError> {
    let a_base = a.base;
    let mut cfg = FileCfg::load(a_base.config.as_ref())?;
    let data = require(a_base.data.or(cfg.path("data")?), "--data")?;
    let out = require(a_base.out.or(cfg.path("out")?), "--out")?;
    let grammar_path = a_base.grammar.or(cfg.path("grammar")?);
    let init = a_base.init.or(cfg.path("init")?);
    let answers_k = pick(a.answers, cfg.usize("answers")?, 32);

    let grammar = load_grammar(grammar_path.as_ref())?;
    let vocab = Vocab::from_grammar(&grammar);
    let model = a_base.model.resolve(&mut cfg, &vocab, &grammar)?;
    let train = a_base.train.resolve(&mut cfg, 500)?;
    cfg.reject_unknown()?;

    let mut dataset = read_dataset(&data)?;
    // The head is trained against this dataset's answer inventory; any
    // answer set stored in the starting checkpoint is superseded.
    let answer_vocab = build_answer_vocab(&mut dataset, answers_k);
    let (mut weights, _) = starting_weights(init.as_ref(), &model, &vocab, train.config.seed)?;
    let sink = CheckpointSink {
        path: &out,
        answers: Some(&answer_vocab),
    };
    let log = finetune_vqa(&mut weights, &dataset, &answer_vocab, &train.config, Some(sink))?;
    write_curve(&log, train.curve.as_ref())?;
    let last = log.records.last().expect("at least one step");
    println!(
        "fine-tuned {} steps over {} answers; final loss {:.4}; checkpoint {}",
        log.records.len(),
        answer_vocab.len(),
        last.loss,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// caption / vqa / eval

/// Decode worker pool size: UVLP_THREADS when set, else the machine's
/// available parallelism.
fn decode_threads() -> usize {
    match std::env::var("UVLP_THREADS") {
        Ok(v) => v.parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

/// Decodes every scene, in dataset order, fanning out across threads.
/// Results land in per-index slots so the output order never depends on
/// scheduling.
fn decode_all(
    weights: &ModelWeights,
    scenes: &[SceneExample],
    greedy: bool,
    beam: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Vec<usize>>, CliError> {
    let threads = decode_threads().min(scenes.len().max(1));
    let decode_one = |scene: &SceneExample| -> Result<Vec<usize>, InferError> {
        if greedy || beam == 1 {
            caption_scene(weights, &scene.regions, max_len)
        } else {
            caption_scene_beam(weights, &scene.regions, beam, max_len, alpha)
        }
    };
    if threads <= 1 {
        return scenes
            .iter()
            .map(|s| decode_one(s).map_err(CliError::from))
            .collect();
    }
    let mut slots: Vec<Option<Vec<usize>>> = vec![None; scenes.len()];
    let chunk = scenes.len().div_ceil(threads);
    let outcome: Result<(), InferError> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (scene_chunk, slot_chunk) in scenes.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            handles.push(scope.spawn(move || -> Result<(), InferError> {
                for (scene, slot) in scene_chunk.iter().zip(slot_chunk.iter_mut()) {
                    *slot = Some(decode_one(scene)?);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("decode worker panicked")?;
        }
        Ok(())
    });
    outcome?;
    Ok(slots.into_iter().map(|s| s.expect("slot filled")).collect())
}

#[derive(Args, Debug)]
struct CaptionArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to decode with.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Scenes to caption (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Beam width (1 = greedy-equivalent search).
    #[arg(long)]
    beam: Option<usize>,
    /// Force the straight greedy decoder.
    #[arg(long)]
    greedy: bool,
    /// Length-normalization exponent for beam scores.
    #[arg(long)]
    length_alpha: Option<f64>,
    /// Decode budget (defaults to the model's text window).
    #[arg(long)]
    max_len: Option<usize>,
    /// Only the first this-many scenes.
    #[arg(long)]
    limit: Option<usize>,
    /// Output file (default stdout). Lines are "scene_id<TAB>caption".
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grammar JSON file (must match the checkpoint).
    #[arg(long)]
    grammar: Option<PathBuf>,
}

fn cmd_caption(a: CaptionArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let ckpt = require(a.ckpt.or(cfg.path("ckpt")?), "--ckpt")?;
    let data = require(a.data.or(cfg.path("data")?), "--data")?;
    let beam = pick(a.beam, cfg.usize("beam")?, 1);
    let greedy = pick_flag(a.greedy, cfg.bool("greedy")?);
    let alpha = pick(a.length_alpha, cfg.f64("length-alpha")?, 0.0);
    let max_len = a.max_len.or(cfg.usize("max-len")?);
    let limit = a.limit.or(cfg.usize("limit")?);
    let out = a.out.or(cfg.path("out")?);
    let grammar_path = a.grammar.or(cfg.path("grammar")?);
    cfg.reject_unknown()?;

    let grammar = load_grammar(grammar_path.as_ref())?;
    let vocab = Vocab::from_grammar(&grammar);
    let loaded = load_checkpoint(&ckpt)?;
    let weights = loaded.weights;
    if weights.config.vocab != vocab.len() {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary ({}) does not match the grammar's ({})",
            weights.config.vocab,
            vocab.len()
        )));
    }
    let mut scenes = read_dataset(&data)?;
    if let Some(k) = limit {
        scenes.truncate(k);
    }
    let max_len = max_len.unwrap_or(weights.config.t);
    let decoded = decode_all(&weights, &scenes, greedy, beam, max_len, alpha)?;
    let lines: Vec<String> = scenes
        .iter()
        .zip(&decoded)
        .map(|(scene, ids)| format!("{}\t{}", scene.scene_id, detokenize(ids, &vocab)))
        .collect();
    emit_lines(&lines, out.as_ref())
}

#[derive(Args, Debug)]
struct VqaArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint with a trained answer head.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Scenes with questions (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Ranked answers per question.
    #[arg(long)]
    topk: Option<usize>,
    /// Only the first this-many scenes.
    #[arg(long)]
    limit: Option<usize>,
    /// Output file (default stdout). Lines are
    /// "scene_id<TAB>question_index<TAB>answer=score[,...]".
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_vqa(a: VqaArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let ckpt = require(a.ckpt.or(cfg.path("ckpt")?), "--ckpt")?;
    let data = require(a.data.or(cfg.path("data")?), "--data")?;
    let topk = pick(a.topk, cfg.usize("topk")?, 1);
    let limit = a.limit.or(cfg.usize("limit")?);
    let out = a.out.or(cfg.path("out")?);
    cfg.reject_unknown()?;

    let loaded = load_checkpoint(&ckpt)?;
    let weights = loaded.weights;
    let answers = loaded.answers.ok_or_else(|| {
        CliError::Failed(format!(
            "checkpoint {} has no answer vocabulary; train one with finetune-vqa",
            ckpt.display()
        ))
    })?;
    let mut scenes = read_dataset(&data)?;
    if let Some(k) = limit {
        scenes.truncate(k);
    }
    let mut lines = Vec::new();
    for scene in &scenes {
        for (qi, qa) in scene.qa.iter().enumerate() {
            let ranked = vqa_predict(&weights, scene, &qa.question, topk)?;
            let fields: Vec<String> = ranked
                .iter()
                .map(|&(id, score)| format!("{}={:.6}", answers.answer(id), score))
                .collect();
            lines.push(format!("{}\t{}\t{}", scene.scene_id, qi, fields.join(",")));
        }
    }
    emit_lines(&lines, out.as_ref())
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Evaluation dataset (JSON lines).
    #[arg(long)]
    data: Option<PathBuf>,
    /// What to score: caption | vqa.
    #[arg(long)]
    task: Option<String>,
    /// Beam width for caption decoding.
    #[arg(long)]
    beam: Option<usize>,
    /// Length-normalization exponent for beam scores.
    #[arg(long)]
    length_alpha: Option<f64>,
    /// Report JSON output path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-example CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Only the first this-many scenes.
    #[arg(long)]
    limit: Option<usize>,
    /// Grammar JSON file (must match the checkpoint).
    #[arg(long)]
    grammar: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let ckpt = require(a.ckpt.or(cfg.path("ckpt")?), "--ckpt")?;
    let data = require(a.data.or(cfg.path("data")?), "--data")?;
    let task = pick(a.task.clone(), cfg.string("task")?, "caption".to_string());
    let beam = pick(a.beam, cfg.usize("beam")?, 1);
    let alpha = pick(a.length_alpha, cfg.f64("length-alpha")?, 0.0);
    let report_path = require(a.report.or(cfg.path("report")?), "--report")?;
    let csv = a.csv.or(cfg.path("csv")?);
    let limit = a.limit.or(cfg.usize("limit")?);
    let grammar_path = a.grammar.or(cfg.path("grammar")?);
    cfg.reject_unknown()?;

    let loaded = load_checkpoint(&ckpt)?;
    let weights = loaded.weights;
    let mut scenes = read_dataset(&data)?;
    if let Some(k) = limit {
        scenes.truncate(k);
    }
    let mut report = EvalReport::new(data.display().to_string());

    match task.as_str() {
        "caption" => {
            let grammar = load_grammar(grammar_path.as_ref())?;
            let vocab = Vocab::from_grammar(&grammar);
            if weights.config.vocab != vocab.len() {
                return Err(CliError::Usage(format!(
                    "checkpoint vocabulary ({}) does not match the grammar's ({})",
                    weights.config.vocab,
                    vocab.len()
                )));
            }
            let decoded = decode_all(&weights, &scenes, false, beam, weights.config.t, alpha)?;
            let mut hyps = Vec::with_capacity(scenes.len());
            let mut refs = Vec::with_capacity(scenes.len());
            let mut exact = 0usize;
            for (scene, ids) in scenes.iter().zip(&decoded) {
                if *ids == scene.caption {
                    exact += 1;
                }
                let hyp = detokenize(ids, &vocab);
                let reference = detokenize(&scene.caption, &vocab);
                // Keep empty decodes scoreable: a placeholder word no
                // reference contains.
                hyps.push(if hyp.is_empty() { "<empty>".into() } else { hyp });
                refs.push(vec![reference]);
            }
            let corpus = bleu4(&hyps, &refs)?;
            for (hyp, rs) in hyps.iter().zip(&refs) {
                let score = bleu4(std::slice::from_ref(hyp), std::slice::from_ref(rs))?;
                report.examples.push(ExampleRecord {
                    reference: rs[0].clone(),
                    hypothesis: hyp.clone(),
                    score,
                });
            }
            report.metrics.insert("bleu4".into(), corpus);
            report
                .metrics
                .insert("exact_match".into(), exact as f64 / scenes.len().max(1) as f64);
        }
        "vqa" => {
            let answers = loaded.answers.ok_or_else(|| {
                CliError::Failed(format!(
                    "checkpoint {} has no answer vocabulary; train one with finetune-vqa",
                    ckpt.display()
                ))
            })?;
            // Relabel against the checkpoint's answers so gold ids line up
            // regardless of how the dataset was generated.
            apply_answer_vocab(&mut scenes, &answers);
            let mut top1 = Vec::new();
            let mut gold = Vec::new();
            for scene in &scenes {
                for qa in &scene.qa {
                    let ranked = vqa_predict(&weights, scene, &qa.question, 1)?;
                    let pred = ranked[0].0;
                    top1.push(pred);
                    gold.push(qa.soft_labels.clone());
                    report.examples.push(ExampleRecord {
                        reference: qa.answer.clone(),
                        hypothesis: answers.answer(pred).to_string(),
                        score: qa.soft_labels.get(pred).copied().unwrap_or(0.0),
                    });
                }
            }
            let acc = qa_accuracy(&top1, &gold)?;
            report.metrics.insert("qa_accuracy".into(), acc);
        }
        other => {
            return Err(CliError::Usage(format!(
                "--task must be caption or vqa, got {other}"
            )))
        }
    }

    report.write_json(&report_path)?;
    if let Some(csv_path) = &csv {
        report.write_examples_csv(csv_path)?;
    }
    let metric_line: Vec<String> = report
        .metrics
        .iter()
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect();
    println!(
        "evaluated {} scenes: {}; report {}",
        scenes.len(),
        metric_line.join(" "),
        report_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// grad-check

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenes in the check batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Finite-difference step widths, comma-separated; each coordinate is
    /// scored by its best-conditioned width.
    #[arg(long)]
    h: Option<String>,
    /// Pass/fail threshold on the max relative error.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Seeds the scenes, weights, and corruption plan.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    model: ModelFlags,
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let batch = pick(a.batch, cfg.usize("batch")?, 2);
    let h_spec = pick(a.h, cfg.string("h")?, "4e-5,3e-4,2e-3".to_string());
    let hs: Vec<f64> = h_spec
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| s.to_string()))
        .collect::<Result<_, _>>()
        .map_err(|bad| CliError::Usage(format!("bad step width {bad:?} in --h")))?;
    if hs.iter().any(|&h| h <= 0.0) {
        return Err(CliError::Usage("step widths must be positive".into()));
    }
    let tolerance = pick(a.tolerance, cfg.f64("tolerance")?, 1e-4);
    let seed = pick(a.seed, cfg.u64("seed")?, 0);

    let grammar = GrammarSpec::default();
    let vocab = Vocab::from_grammar(&grammar);
    // Audit shape: small enough to difference every coordinate quickly,
    // deep enough to cross every op.
    let mut model = a.model.resolve(&mut cfg, &vocab, &grammar)?;
    if a.model.layers.is_none() && !cfg.map.contains_key("layers") {
        model.config.layers = 2;
    }
    if a.model.dim.is_none() && !cfg.map.contains_key("dim") {
        model.config.d = 16;
        model.config.ffn = 64;
        model.config.heads = 2;
    }
    if a.model.regions.is_none() && !cfg.map.contains_key("regions") {
        model.config.n = 4;
    }
    if a.model.window.is_none() && !cfg.map.contains_key("window") {
        model.config.t = 6;
    }
    model.config.max_u = model.config.n + model.config.t + 3;
    model.config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.reject_unknown()?;

    let scenes: Vec<SceneExample> = (0..batch)
        .map(|i| generate_scene(seed + i as u64, &grammar, model.config.n, 0.05))
        .collect::<Result<_, _>>()?;
    let batch_refs: Vec<&SceneExample> = scenes.iter().collect();
    let mut weights =
        ModelWeights::init(&model.config, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let started = std::time::Instant::now();
    let err = masked_lm_fd_max_err(
        &mut weights,
        &batch_refs,
        &vocab,
        &CorruptionConfig::default(),
        Objective::Seq2Seq,
        seed,
        &hs,
    )?;
    println!(
        "max relative error {err:.3e} over {} parameters in {:.1?} (tolerance {tolerance:.1e})",
        weights.store.numel(),
        started.elapsed()
    );
    if err < tolerance {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: {err:.3e} >= {tolerance:.1e}"
        )))
    }
}

// ---------------------------------------------------------------------------
// curves

#[derive(Args, Debug)]
struct CurvesArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Merged CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training-log CSVs to merge, in column order.
    runs: Vec<PathBuf>,
}

fn cmd_curves(a: CurvesArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let out = require(a.out.or(cfg.path("out")?), "--out")?;
    let runs = if a.runs.is_empty() {
        cfg.string("runs")?
            .map(|s| s.split(',').map(PathBuf::from).collect())
            .unwrap_or_default()
    } else {
        a.runs
    };
    cfg.reject_unknown()?;
    if runs.is_empty() {
        return Err(CliError::Usage("curves needs at least one run CSV".into()));
    }

    let mut columns: Vec<std::collections::BTreeMap<u64, String>> = Vec::new();
    for path in &runs {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if !header.starts_with("step,") {
            return Err(CliError::Failed(format!(
                "{} does not look like a training log (header {header:?})",
                path.display()
            )));
        }
        let mut col = std::collections::BTreeMap::new();
        for (idx, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let step: u64 = fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    CliError::Failed(format!("{} line {}: bad step", path.display(), idx + 2))
                })?;
            let loss = fields.nth(1).ok_or_else(|| {
                CliError::Failed(format!("{} line {}: missing loss", path.display(), idx + 2))
            })?;
            col.insert(step, loss.to_string());
        }
        columns.push(col);
    }

    let mut steps: Vec<u64> = columns
        .iter()
        .flat_map(|c| c.keys().copied())
        .collect::<std::collections::BTreeSet<u64>>()
        .into_iter()
        .collect();
    steps.sort_unstable();

    let mut body = String::from("step");
    for i in 1..=columns.len() {
        body.push_str(&format!(",run{i}_loss"));
    }
    body.push('\n');
    for step in steps {
        body.push_str(&step.to_string());
        for col in &columns {
            body.push(',');
            if let Some(loss) = col.get(&step) {
                body.push_str(loss);
            }
        }
        body.push('\n');
    }
    let tmp = out.with_extension("tmp");
    std::fs::write(&tmp, body).map_err(|source| CliError::Io {
        path: tmp.clone(),
        source,
    })?;
    std::fs::rename(&tmp, &out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    println!("merged {} runs into {}", columns.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// transfer / ablation

#[derive(Args, Debug)]
struct TransferArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which fine-tuning task to compare: caption | vqa.
    #[arg(long)]
    task: Option<String>,
    /// Report JSON output path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    finetune_budget: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    target: Option<f64>,
    /// Comma-separated fine-tuning seeds.
    #[arg(long)]
    seeds: Option<String>,
}

fn cmd_transfer(a: TransferArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let task = pick(a.task.clone(), cfg.string("task")?, "caption".to_string());
    let report_path = require(a.report.or(cfg.path("report")?), "--report")?;
    let mut tc = TransferConfig::desk();
    tc.pretrain_steps = pick(a.pretrain_steps, cfg.u64("pretrain-steps")?, tc.pretrain_steps);
    tc.finetune_budget = pick(a.finetune_budget, cfg.u64("finetune-budget")?, tc.finetune_budget);
    tc.eval_every = pick(a.eval_every, cfg.u64("eval-every")?, tc.eval_every);
    tc.target = pick(a.target, cfg.f64("target")?, tc.target);
    if let Some(seeds) = pick(a.seeds.clone(), cfg.string("seeds")?, String::new())
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<u64>().map_err(|_| s.to_string()))
        .collect::<Result<Vec<u64>, String>>()
        .map_err(|bad| CliError::Usage(format!("bad seed {bad:?} in --seeds")))
        .map(|v| (!v.is_empty()).then_some(v))?
    {
        tc.seeds = seeds;
    }
    cfg.reject_unknown()?;

    let report = match task.as_str() {
        "caption" => caption_transfer(&tc)?,
        "vqa" => vqa_transfer(&tc)?,
        other => {
            return Err(CliError::Usage(format!(
                "--task must be caption or vqa, got {other}"
            )))
        }
    };
    report.write_json(&report_path)?;
    println!(
        "{} transfer: pretrained reached {} in median {:?} steps vs scratch {:?}; final {:.3} vs {:.3}; report {}",
        report.task,
        report.target,
        report.pretrained.median_steps_to_target,
        report.scratch.median_steps_to_target,
        report.pretrained.median_final_metric,
        report.scratch.median_final_metric,
        report_path.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
struct AblationArgs {
    /// Flat JSON config file; flags win on conflict.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report JSON output path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    finetune_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_ablation(a: AblationArgs) -> Result<(), CliError> {
    let mut cfg = FileCfg::load(a.config.as_ref())?;
    let report_path = require(a.report.or(cfg.path("report")?), "--report")?;
    let mut ac = AblationConfig::desk();
    ac.pretrain_steps = pick(a.pretrain_steps, cfg.u64("pretrain-steps")?, ac.pretrain_steps);
    ac.finetune_steps = pick(a.finetune_steps, cfg.u64("finetune-steps")?, ac.finetune_steps);
    ac.seed = pick(a.seed, cfg.u64("seed")?, ac.seed);
    cfg.reject_unknown()?;

    let report = region_label_ablation(&ac)?;
    report.write_json(&report_path)?;
    for arm in &report.arms {
        println!(
            "{}: bleu4 {:.3}, exact {:.3}, masked-lm acc {:.3}",
            arm.label, arm.caption_bleu4, arm.greedy_exact_match, arm.val_masked_lm_accuracy
        );
    }
    println!(
        "preferred by bleu4: {}; report {}",
        report.preferred_by_bleu,
        report_path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_dataset(dir: &std::path::Path, scenes: usize) -> PathBuf {
        let path = dir.join("scenes.jsonl");
        let code = run_from([
            "uvlp",
            "gen-data",
            "--seed",
            "1",
            "--scenes",
            &scenes.to_string(),
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        path
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run_from(["uvlp", "gen-data", "--nope", "1"]), 1);
        assert_eq!(run_from(["uvlp", "no-such-command"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_from(["uvlp", "--help"]), 0);
    }

    #[test]
    fn missing_required_value_is_usage_error() {
        // --out is required but absent from both flag and config.
        assert_eq!(run_from(["uvlp", "gen-data", "--scenes", "2"]), 1);
    }

    #[test]
    fn gen_data_writes_a_readable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = desk_dataset(dir.path(), 4);
        let scenes = read_dataset(&path).unwrap();
        assert_eq!(scenes.len(), 4);
    }

    #[test]
    fn gen_data_is_reproducible_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        for out in [&a, &b] {
            let code = run_from([
                "uvlp",
                "gen-data",
                "--seed",
                "7",
                "--scenes",
                "6",
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0);
        }
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn config_file_supplies_flags_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let out_cfg = dir.path().join("from_cfg.jsonl");
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(
            &cfg_path,
            format!(
                "{{\"scenes\": 3, \"seed\": 5, \"out\": \"{}\"}}",
                out_cfg.display()
            ),
        )
        .unwrap();
        // Config alone.
        let code = run_from(["uvlp", "gen-data", "--config", cfg_path.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert_eq!(read_dataset(&out_cfg).unwrap().len(), 3);

        // Flag overrides the config's scene count.
        let out_flag = dir.path().join("from_flag.jsonl");
        let code = run_from([
            "uvlp",
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--scenes",
            "2",
            "--out",
            out_flag.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert_eq!(read_dataset(&out_flag).unwrap().len(), 2);
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(&cfg_path, "{\"scense\": 3}").unwrap();
        let code = run_from([
            "uvlp",
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().join("x.jsonl").to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn pretrain_then_caption_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = desk_dataset(dir.path(), 6);
        let ckpt = dir.path().join("model.uvlp");
        let curve = dir.path().join("log.csv");
        let code = run_from([
            "uvlp",
            "pretrain",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--steps",
            "3",
            "--batch",
            "2",
            "--layers",
            "1",
            "--dim",
            "16",
            "--heads",
            "2",
            "--ffn",
            "32",
            "--curve",
            curve.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(ckpt.exists());
        let log = std::fs::read_to_string(&curve).unwrap();
        assert!(log.starts_with("step,objective,loss,acc,wallclock_ms"));
        assert_eq!(log.lines().count(), 4);

        // Greedy flag and beam=1 must print identical captions.
        let out_beam = dir.path().join("beam.txt");
        let out_greedy = dir.path().join("greedy.txt");
        for (out, extra) in [(&out_beam, None), (&out_greedy, Some("--greedy"))] {
            let mut argv = vec![
                "uvlp",
                "caption",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--beam",
                "1",
                "--out",
                out.to_str().unwrap(),
            ];
            if let Some(flag) = extra {
                argv.push(flag);
            }
            assert_eq!(run_from(argv), 0);
        }
        assert_eq!(
            std::fs::read(&out_beam).unwrap(),
            std::fs::read(&out_greedy).unwrap()
        );

        // Evaluation writes a report with the expected metrics.
        let report = dir.path().join("report.json");
        let csv = dir.path().join("examples.csv");
        let code = run_from([
            "uvlp",
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--task",
            "caption",
            "--report",
            report.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&report).unwrap();
        assert!(body.contains("bleu4"));
        assert!(body.contains("exact_match"));
        assert!(std::fs::read_to_string(&csv)
            .unwrap()
            .starts_with("reference,hypothesis,score"));
    }

    #[test]
    fn finetune_vqa_then_answer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = desk_dataset(dir.path(), 6);
        let ckpt = dir.path().join("vqa.uvlp");
        let code = run_from([
            "uvlp",
            "finetune-vqa",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--steps",
            "3",
            "--batch",
            "2",
            "--layers",
            "1",
            "--dim",
            "16",
            "--heads",
            "2",
            "--ffn",
            "32",
        ]);
        assert_eq!(code, 0);

        let out = dir.path().join("answers.txt");
        let code = run_from([
            "uvlp",
            "vqa",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--limit",
            "2",
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&out).unwrap();
        assert!(body.lines().count() >= 2);
        assert!(body.lines().all(|l| l.split('\t').count() == 3));

        // A caption checkpoint has no answer head: runtime failure, not
        // usage.
        let cap_ckpt = dir.path().join("cap.uvlp");
        let code = run_from([
            "uvlp",
            "pretrain",
            "--data",
            data.to_str().unwrap(),
            "--out",
            cap_ckpt.to_str().unwrap(),
            "--steps",
            "2",
            "--batch",
            "2",
            "--layers",
            "1",
            "--dim",
            "16",
            "--heads",
            "2",
            "--ffn",
            "32",
        ]);
        assert_eq!(code, 0);
        let code = run_from([
            "uvlp",
            "vqa",
            "--ckpt",
            cap_ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn finetune_rejects_mismatched_model_flags() {
        let dir = tempfile::tempdir().unwrap();
        let data = desk_dataset(dir.path(), 6);
        let ckpt = dir.path().join("model.uvlp");
        let code = run_from([
            "uvlp",
            "pretrain",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--steps",
            "2",
            "--batch",
            "2",
            "--layers",
            "1",
            "--dim",
            "16",
            "--heads",
            "2",
            "--ffn",
            "32",
        ]);
        assert_eq!(code, 0);
        // Asking for a different width than the checkpoint carries fails.
        let code = run_from([
            "uvlp",
            "finetune-caption",
            "--data",
            data.to_str().unwrap(),
            "--init",
            ckpt.to_str().unwrap(),
            "--out",
            dir.path().join("ft.uvlp").to_str().unwrap(),
            "--steps",
            "2",
            "--batch",
            "2",
            "--dim",
            "32",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn curves_merges_runs_by_step() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(
            &a,
            "step,objective,loss,acc,wallclock_ms\n1,seq2seq,4.0,0.1,3\n2,seq2seq,3.0,0.2,3\n",
        )
        .unwrap();
        std::fs::write(
            &b,
            "step,objective,loss,acc,wallclock_ms\n1,bidirectional,5.0,0.1,3\n3,bidirectional,2.0,0.4,3\n",
        )
        .unwrap();
        let out = dir.path().join("merged.csv");
        let code = run_from([
            "uvlp",
            "curves",
            "--out",
            out.to_str().unwrap(),
            a.to_str().unwrap(),
            b.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines[0], "step,run1_loss,run2_loss");
        assert_eq!(lines[1], "1,4.0,5.0");
        assert_eq!(lines[2], "2,3.0,");
        assert_eq!(lines[3], "3,,2.0");
    }

    #[test]
    fn grad_check_passes_on_a_tiny_model() {
        // Trimmed audit so the unit suite stays quick; the acceptance suite
        // runs the full shape.
        assert_eq!(
            run_from([
                "uvlp",
                "grad-check",
                "--layers",
                "1",
                "--dim",
                "8",
                "--heads",
                "2",
                "--ffn",
                "16",
                "--regions",
                "4",
                "--window",
                "4",
                "--batch",
                "1",
            ]),
            0
        );
    }
}
