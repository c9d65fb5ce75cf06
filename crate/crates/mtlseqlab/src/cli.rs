//! Command-line surface: the merged run configuration, the subcommand
//! definitions, and one function per subcommand.
//!
//! Configuration is layered: built-in defaults, then a line-oriented
//! `key=value` config file, then explicit flags, then the `MTLSEQLAB_SEED`
//! environment variable (which overrides the seed wherever it came from).
//! Every command is deterministic given the merged configuration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    build_vocabularies, default_inventory, gen_synthetic, parse_conll, partition_oov, repair_bio,
    write_conll, Sentence, SynthSpec, TagSet,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    boundary_inconsistency, concept_prf, corpus_spans, report_kv, stratified_report, EntitySpan,
};
use crate::multitask::{
    gradcheck_instance, gradcheck_run, load_checkpoint, save_checkpoint, train, train_single_task,
    FeedbackCache, FeedbackSpace, HeadType, MtlConfig, MtlModel, TaskId,
};
use crate::numerics::{OptimizerState, Rng};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_VERIFICATION: i32 = 2;

/// Gradient-check probe width and pass threshold, shared with the
/// `gradcheck` subcommand's exit decision.
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "mtlseqlab",
    about = "Joint medical entity recognition and normalization by multi-task sequence labeling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic linked corpus (train/dev/test TSV).
    GenData(GenDataArgs),
    /// Train the joint model; writes a checkpoint and a per-step loss log.
    Train(Box<TrainArgs>),
    /// Tag a corpus with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a prediction file against gold annotations.
    Evaluate(EvaluateArgs),
    /// Verify backprop gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

/// Everything a command can consume, merged from defaults, config file, and
/// flags. Unused fields are ignored by each command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // paths
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub out_dir: PathBuf,
    // model
    pub layers: usize,
    pub hidden_dim: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub window: usize,
    pub num_filters: usize,
    // training
    pub lr: f64,
    pub momentum: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub min_count: usize,
    // mode
    pub head: HeadType,
    pub feedback_mer_to_men: bool,
    pub feedback_men_to_mer: bool,
    pub feedback_space: FeedbackSpace,
    pub rounds: usize,
    pub reset_cache_per_epoch: bool,
    pub single_task: Option<TaskId>,
    // data generation
    pub gen_train: usize,
    pub gen_dev: usize,
    pub gen_test: usize,
    pub noise: f64,
    // verification
    pub gradcheck_head: String,
    pub corrupt: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            dev: None,
            test: None,
            embeddings: None,
            checkpoint: None,
            log: None,
            input: None,
            output: None,
            gold: None,
            pred: None,
            out_dir: PathBuf::from("data"),
            layers: 3,
            hidden_dim: 100,
            word_dim: 100,
            char_dim: 30,
            window: 3,
            num_filters: 30,
            lr: 0.001,
            momentum: 0.9,
            dropout: 0.5,
            epochs: 20,
            seed: 1,
            min_count: 1,
            head: HeadType::Crf,
            feedback_mer_to_men: true,
            feedback_men_to_mer: true,
            feedback_space: FeedbackSpace::LogProb,
            rounds: 1,
            reset_cache_per_epoch: false,
            single_task: None,
            gen_train: 50,
            gen_dev: 15,
            gen_test: 15,
            noise: 0.0,
            gradcheck_head: "both".into(),
            corrupt: None,
        }
    }
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` must be on/off, got `{value}`"
        ))),
    }
}

impl RunConfig {
    /// Apply one `key=value` entry (shared by the config-file parser and the
    /// stringly-typed flags).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "train" => self.train = Some(PathBuf::from(value)),
            "dev" => self.dev = Some(PathBuf::from(value)),
            "test" => self.test = Some(PathBuf::from(value)),
            "embeddings" => self.embeddings = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "log" => self.log = Some(PathBuf::from(value)),
            "input" => self.input = Some(PathBuf::from(value)),
            "output" => self.output = Some(PathBuf::from(value)),
            "gold" => self.gold = Some(PathBuf::from(value)),
            "pred" => self.pred = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "layers" => self.layers = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "word_dim" => self.word_dim = num(key, value)?,
            "char_dim" => self.char_dim = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "num_filters" => self.num_filters = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "min_count" => self.min_count = num(key, value)?,
            "head" => self.head = value.parse()?,
            "feedback_mer_to_men" => self.feedback_mer_to_men = parse_flag(key, value)?,
            "feedback_men_to_mer" => self.feedback_men_to_mer = parse_flag(key, value)?,
            "feedback_space" => self.feedback_space = value.parse()?,
            "rounds" => self.rounds = num(key, value)?,
            "reset_cache_per_epoch" => self.reset_cache_per_epoch = parse_flag(key, value)?,
            "single_task" => {
                self.single_task = match value.to_ascii_lowercase().as_str() {
                    "none" | "" => None,
                    _ => Some(value.parse()?),
                }
            }
            "gen_train" => self.gen_train = num(key, value)?,
            "gen_dev" => self.gen_dev = num(key, value)?,
            "gen_test" => self.gen_test = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "gradcheck_head" => self.gradcheck_head = value.to_string(),
            "corrupt" => self.corrupt = Some(value.to_string()),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Layer a `key=value` file onto the current values. Blank lines and
    /// `#` comments are skipped.
    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }

    /// The model hyperparameters as seen by the multitask core.
    pub fn mtl_config(&self) -> MtlConfig {
        MtlConfig {
            layers: self.layers,
            hidden_dim: self.hidden_dim,
            word_dim: self.word_dim,
            char: crate::encoders::CharCnnConfig {
                char_dim: self.char_dim,
                window: self.window,
                num_filters: self.num_filters,
            },
            dropout: self.dropout,
            head: self.head,
            feedback_mer_to_men: self.feedback_mer_to_men,
            feedback_men_to_mer: self.feedback_men_to_mer,
            feedback_space: self.feedback_space,
            train_word_embeddings: true,
        }
    }
}

/// Defaults → config file → flag overrides → `MTLSEQLAB_SEED`.
fn merged(
    config: Option<&PathBuf>,
    apply: impl FnOnce(&mut RunConfig) -> Result<()>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.load_file(path)?;
    }
    apply(&mut cfg)?;
    if let Ok(s) = std::env::var("MTLSEQLAB_SEED") {
        cfg.seed = s.trim().parse().map_err(|_| {
            Error::Config(format!("MTLSEQLAB_SEED must be an integer, got `{s}`"))
        })?;
    }
    Ok(cfg)
}

fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    field
        .as_ref()
        .ok_or_else(|| Error::Config(format!("`{name}` path is required")))
}

#[derive(Args, Debug, Default)]
pub struct GenDataArgs {
    /// Line-oriented key=value config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving train.tsv, dev.tsv, and test.tsv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub gen_train: Option<usize>,
    #[arg(long)]
    pub gen_dev: Option<usize>,
    #[arg(long)]
    pub gen_test: Option<usize>,
    /// Probability that a mention's MEN concept is corrupted.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Line-oriented key=value config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus (token, MER tag, MEN tag TSV).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Held-out corpus scored after training (summary on stderr).
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Pretrained word embeddings (token + word_dim floats per line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Where to write the trained model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the per-step loss log to this file.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub word_dim: Option<usize>,
    #[arg(long)]
    pub char_dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub num_filters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Words seen fewer times than this in training map to UNK.
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Task head: greedy or crf.
    #[arg(long)]
    pub head: Option<String>,
    /// MER output feeds the MEN head: on or off.
    #[arg(long)]
    pub feedback_mer_to_men: Option<String>,
    /// MEN output feeds the MER head: on or off.
    #[arg(long)]
    pub feedback_men_to_mer: Option<String>,
    /// How cached feedback vectors are consumed: logprob or prob.
    #[arg(long)]
    pub feedback_space: Option<String>,
    /// Drop the feedback cache at every epoch boundary: on or off.
    #[arg(long)]
    pub reset_cache_per_epoch: Option<String>,
    /// Train one head only (MER or MEN) as a single-task baseline.
    #[arg(long)]
    pub single_task: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct PredictArgs {
    /// Line-oriented key=value config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus to tag; existing tag columns are ignored.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Where to write the tagged TSV.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Inference feedback rounds (0 = plain shared encoder).
    #[arg(long)]
    pub rounds: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct EvaluateArgs {
    /// Line-oriented key=value config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Training corpus for the OOV breakdown (requires --embeddings too).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Embedding file for the OOV breakdown (requires --train too).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct GradcheckArgs {
    /// Line-oriented key=value config file; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Head type to probe: greedy, crf, or both.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Negative-control hook: perturb this parameter's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

fn set_opt<T: std::fmt::Display>(
    cfg: &mut RunConfig,
    key: &str,
    value: &Option<T>,
) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn set_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, &v.display().to_string())?;
    }
    Ok(())
}

impl GenDataArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set_path(cfg, "out_dir", &self.out_dir)?;
        set_opt(cfg, "gen_train", &self.gen_train)?;
        set_opt(cfg, "gen_dev", &self.gen_dev)?;
        set_opt(cfg, "gen_test", &self.gen_test)?;
        set_opt(cfg, "noise", &self.noise)?;
        set_opt(cfg, "seed", &self.seed)
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set_path(cfg, "train", &self.train)?;
        set_path(cfg, "dev", &self.dev)?;
        set_path(cfg, "embeddings", &self.embeddings)?;
        set_path(cfg, "checkpoint", &self.checkpoint)?;
        set_path(cfg, "log", &self.log)?;
        set_opt(cfg, "layers", &self.layers)?;
        set_opt(cfg, "hidden_dim", &self.hidden_dim)?;
        set_opt(cfg, "word_dim", &self.word_dim)?;
        set_opt(cfg, "char_dim", &self.char_dim)?;
        set_opt(cfg, "window", &self.window)?;
        set_opt(cfg, "num_filters", &self.num_filters)?;
        set_opt(cfg, "lr", &self.lr)?;
        set_opt(cfg, "momentum", &self.momentum)?;
        set_opt(cfg, "dropout", &self.dropout)?;
        set_opt(cfg, "epochs", &self.epochs)?;
        set_opt(cfg, "seed", &self.seed)?;
        set_opt(cfg, "min_count", &self.min_count)?;
        set_opt(cfg, "head", &self.head)?;
        set_opt(cfg, "feedback_mer_to_men", &self.feedback_mer_to_men)?;
        set_opt(cfg, "feedback_men_to_mer", &self.feedback_men_to_mer)?;
        set_opt(cfg, "feedback_space", &self.feedback_space)?;
        set_opt(cfg, "reset_cache_per_epoch", &self.reset_cache_per_epoch)?;
        set_opt(cfg, "single_task", &self.single_task)
    }
}

impl PredictArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set_path(cfg, "checkpoint", &self.checkpoint)?;
        set_path(cfg, "input", &self.input)?;
        set_path(cfg, "output", &self.output)?;
        set_opt(cfg, "rounds", &self.rounds)
    }
}

impl EvaluateArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set_path(cfg, "gold", &self.gold)?;
        set_path(cfg, "pred", &self.pred)?;
        set_path(cfg, "train", &self.train)?;
        set_path(cfg, "embeddings", &self.embeddings)
    }
}

impl GradcheckArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        set_opt(cfg, "gradcheck_head", &self.head)?;
        set_opt(cfg, "seed", &self.seed)?;
        set_opt(cfg, "corrupt", &self.corrupt)
    }
}

/// Dispatch a parsed command line; the return value is the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_VALIDATION
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => {
            cmd_gen_data(&merged(a.config.as_ref(), |c| a.apply(c))?)?;
            Ok(EXIT_OK)
        }
        Command::Train(a) => {
            cmd_train(&merged(a.config.as_ref(), |c| a.apply(c))?)?;
            Ok(EXIT_OK)
        }
        Command::Predict(a) => {
            cmd_predict(&merged(a.config.as_ref(), |c| a.apply(c))?)?;
            Ok(EXIT_OK)
        }
        Command::Evaluate(a) => {
            cmd_evaluate(&merged(a.config.as_ref(), |c| a.apply(c))?)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck(a) => {
            let passed = cmd_gradcheck(&merged(a.config.as_ref(), |c| a.apply(c))?)?;
            Ok(if passed { EXIT_OK } else { EXIT_VERIFICATION })
        }
    }
}

/// Write the synthetic linked corpus splits into `out_dir`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = SynthSpec {
        train: cfg.gen_train,
        dev: cfg.gen_dev,
        test: cfg.gen_test,
        noise: cfg.noise,
        seed: cfg.seed,
    };
    let inventory = default_inventory();
    let (train, dev, test) = gen_synthetic(&spec, &inventory)?;
    fs::create_dir_all(&cfg.out_dir)?;
    for (name, split) in [("train", &train), ("dev", &dev), ("test", &test)] {
        let path = cfg.out_dir.join(format!("{name}.tsv"));
        write_conll(&path, split)?;
        println!("wrote {} ({} sentences)", path.display(), split.len());
    }
    Ok(())
}

/// Decode one task's tag ids to labels and repair any BIO violations the
/// unconstrained decoder may emit.
fn decode_tags(tagset: &TagSet, ids: &[usize]) -> Vec<String> {
    let mut labels: Vec<String> = ids.iter().map(|&i| tagset.label(i).to_string()).collect();
    repair_bio(&mut labels);
    labels
}

/// Tag every sentence, preserving the tokens verbatim.
fn corpus_predictions(
    model: &MtlModel,
    corpus: &[Sentence],
    rounds: usize,
) -> Result<Vec<Sentence>> {
    corpus
        .iter()
        .map(|s| {
            let p = model.predict(&s.tokens, rounds)?;
            Ok(Sentence {
                id: s.id,
                tokens: s.tokens.clone(),
                mer_tags: Some(decode_tags(model.tag_set(TaskId::Mer), &p.mer_tags)),
                men_tags: Some(decode_tags(model.tag_set(TaskId::Men), &p.men_tags)),
            })
        })
        .collect()
}

/// Train per the asynchronous protocol; loss log to stdout (one line per
/// step: `step task instance_id loss`) and optionally to `cfg.log`.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train_path = require(&cfg.train, "train")?;
    let checkpoint_path = require(&cfg.checkpoint, "checkpoint")?;
    let corpus = parse_conll(train_path, false)?;
    let vocab = build_vocabularies(&corpus, cfg.min_count)?;
    let mut rng = Rng::new(cfg.seed);
    let pretrained = match &cfg.embeddings {
        Some(path) => Some(crate::encoders::load_embeddings(path, cfg.word_dim, &mut rng)?),
        None => None,
    };
    let mut model = MtlModel::new(cfg.mtl_config(), vocab, pretrained.as_ref(), &mut rng)?;
    let mut opt = OptimizerState::new(cfg.lr, cfg.momentum)?;
    let mut cache = FeedbackCache::new();
    let records = match cfg.single_task {
        Some(task) => train_single_task(
            &mut model,
            &corpus,
            task,
            cfg.epochs,
            &mut opt,
            &mut cache,
            &mut rng,
        )?,
        None => train(
            &mut model,
            &corpus,
            &corpus,
            cfg.epochs,
            &mut opt,
            &mut cache,
            cfg.reset_cache_per_epoch,
            &mut rng,
        )?,
    };
    let mut log = String::new();
    for r in &records {
        log.push_str(&format!("{} {} {} {}\n", r.step, r.task, r.instance, r.loss));
    }
    print!("{log}");
    if let Some(path) = &cfg.log {
        fs::write(path, &log)?;
    }
    save_checkpoint(&model, checkpoint_path)?;
    eprintln!("saved checkpoint to {}", checkpoint_path.display());
    if let Some(dev_path) = &cfg.dev {
        let dev = parse_conll(dev_path, false)?;
        let pred = corpus_predictions(&model, &dev, cfg.rounds)?;
        for task in TaskId::BOTH {
            let report = concept_prf(&corpus_spans(&dev, task)?, &corpus_spans(&pred, task)?);
            eprintln!("dev {task} f1 {:.4}", report.f1);
        }
    }
    Ok(())
}

/// Tag `cfg.input` with a trained checkpoint and write the TSV to
/// `cfg.output`. Tokens pass through verbatim.
pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let checkpoint = require(&cfg.checkpoint, "checkpoint")?;
    let input = require(&cfg.input, "input")?;
    let output = require(&cfg.output, "output")?;
    let model = load_checkpoint(checkpoint)?;
    let corpus = parse_conll(input, true)?;
    let predictions = corpus_predictions(&model, &corpus, cfg.rounds)?;
    write_conll(output, &predictions)?;
    eprintln!("wrote {}", output.display());
    Ok(())
}

fn check_alignment(gold: &[Sentence], pred: &[Sentence]) -> Result<()> {
    let common = gold.len().min(pred.len());
    for i in 0..common {
        if gold[i].tokens != pred[i].tokens {
            return Err(Error::TokenMisalignment { sentence: i });
        }
    }
    if gold.len() != pred.len() {
        return Err(Error::TokenMisalignment { sentence: common });
    }
    Ok(())
}

fn task_spans(corpus: &[Sentence], task: TaskId, which: &str) -> Result<Vec<EntitySpan>> {
    if corpus.iter().any(|s| s.tags(task).is_none()) {
        return Err(Error::Config(format!(
            "{which} file is missing the {task} tag column"
        )));
    }
    corpus_spans(corpus, task)
}

/// First whitespace-separated field of every line, skipping an optional
/// `count dim` header.
fn embedding_word_set(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path)?;
    let is_int = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    let mut words = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| is_int(f)) {
            continue;
        }
        words.insert(fields[0].to_string());
    }
    Ok(words)
}

/// Score predictions against gold: concept-level P/R/F1 per task, the
/// boundary-inconsistency ratio between the two predicted span streams, and
/// (when both a training corpus and an embedding file are given) the
/// IV/OOTV/OOEV/OOBV breakdown. Output is flat `key=value` on stdout.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let gold_path = require(&cfg.gold, "gold")?;
    let pred_path = require(&cfg.pred, "pred")?;
    let gold = parse_conll(gold_path, false)?;
    let pred = parse_conll(pred_path, false)?;
    check_alignment(&gold, &pred)?;
    let vocab_sets = match (&cfg.train, &cfg.embeddings) {
        (Some(train), Some(emb)) => {
            let corpus = parse_conll(train, false)?;
            let train_words: BTreeSet<String> = corpus
                .iter()
                .flat_map(|s| s.tokens.iter().cloned())
                .collect();
            Some((train_words, embedding_word_set(emb)?))
        }
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "the OOV breakdown needs both `train` and `embeddings`".into(),
            ))
        }
    };
    let mut out = String::new();
    let mut pred_streams = Vec::new();
    for task in TaskId::BOTH {
        let gold_spans = task_spans(&gold, task, "gold")?;
        let pred_spans = task_spans(&pred, task, "pred")?;
        let report = concept_prf(&gold_spans, &pred_spans);
        for line in report_kv(&report, None).lines() {
            out.push_str(&format!("{}.{line}\n", task.key()));
        }
        if let Some((train_words, emb_words)) = &vocab_sets {
            let partition = partition_oov(&gold, task, train_words, emb_words)?;
            for (class, r) in stratified_report(&gold_spans, &pred_spans, &partition)? {
                for line in report_kv(&r, None).lines() {
                    out.push_str(&format!(
                        "{}.oov.{}.{line}\n",
                        task.key(),
                        class.name().to_ascii_lowercase()
                    ));
                }
            }
        }
        pred_streams.push(pred_spans);
    }
    let boundary = boundary_inconsistency(&pred_streams[0], &pred_streams[1]);
    out.push_str(&format!("boundary_inconsistency={boundary}\n"));
    print!("{out}");
    Ok(())
}

/// Run the gradient check for the configured head type(s); prints one line
/// per parameter group and a final verdict. Returns whether all groups
/// passed.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    let heads: Vec<HeadType> = match cfg.gradcheck_head.as_str() {
        "both" => vec![HeadType::Greedy, HeadType::Crf],
        "greedy" => vec![HeadType::Greedy],
        "crf" => vec![HeadType::Crf],
        other => {
            return Err(Error::Config(format!(
                "gradcheck head must be greedy, crf, or both, got `{other}`"
            )))
        }
    };
    let mut all_pass = true;
    for head in heads {
        let inst = gradcheck_instance(head, cfg.seed)?;
        for (group, err) in gradcheck_run(&inst, GRADCHECK_EPS, cfg.corrupt.as_deref())? {
            let ok = err < GRADCHECK_THRESHOLD;
            all_pass &= ok;
            println!("{head} {group} {err:e} {}", if ok { "pass" } else { "FAIL" });
        }
    }
    println!("gradcheck: {}", if all_pass { "PASS" } else { "FAIL" });
    Ok(all_pass)
}
