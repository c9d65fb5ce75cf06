//! Multi-task model: shared encoder, per-task heads, explicit feedback, and
//! the asynchronous training protocol.
//!
//! Both task heads consume one physically shared k-layer BiLSTM-CNN encoder
//! (hard parameter sharing). On top of the shared per-token feature `v`,
//! each head receives `v ∘ (v + y·M)` where `y` is the other task's output
//! vector for that token (served from a cache during training, from the
//! previous round during inference, or the uniform `1/|L|` initialization)
//! and `M` is a learned mapping matrix (`U` into MER, `V` into MEN). A
//! training step on task `t` updates the shared encoder, `f_t`'s head, and
//! the mapping matrix feeding `t` — never the other head.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use crate::corpus::{Sentence, TagSet, Vocabularies};
use crate::encoders::{
    init_uniform, init_uniform_matrix, init_weight, word_repr_ids, CharCnnConfig, CharCnnVars,
    EmbeddingTable,
};
use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{
    clip_grads_per_tensor, finite_diff_grad, max_relative_error, sgd_momentum_step_subset,
    ModelParams, OptimizerState, ParamGrads, Rng, Tensor,
};
use crate::sequence_model::{
    bilstm_encode, crf_nll_tape, crf_token_logprobs, crf_viterbi, greedy_decode, greedy_nll,
    LstmDirVars,
};

/// The two jointly trained tasks: entity recognition and normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    Mer,
    Men,
}

impl TaskId {
    pub const BOTH: [TaskId; 2] = [TaskId::Mer, TaskId::Men];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Mer => "MER",
            TaskId::Men => "MEN",
        }
    }

    /// Lowercase key used in parameter names and config files.
    pub fn key(self) -> &'static str {
        match self {
            TaskId::Mer => "mer",
            TaskId::Men => "men",
        }
    }

    /// The opposite task (the feedback producer for `self`).
    pub fn other(self) -> TaskId {
        match self {
            TaskId::Mer => TaskId::Men,
            TaskId::Men => TaskId::Mer,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<TaskId> {
        match s.to_ascii_lowercase().as_str() {
            "mer" => Ok(TaskId::Mer),
            "men" => Ok(TaskId::Men),
            _ => Err(Error::Config(format!("unknown task `{s}` (MER or MEN)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadType {
    Greedy,
    Crf,
}

impl fmt::Display for HeadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadType::Greedy => "greedy",
            HeadType::Crf => "crf",
        })
    }
}

impl FromStr for HeadType {
    type Err = Error;

    fn from_str(s: &str) -> Result<HeadType> {
        match s {
            "greedy" => Ok(HeadType::Greedy),
            "crf" => Ok(HeadType::Crf),
            _ => Err(Error::Config(format!("unknown head type `{s}` (greedy or crf)"))),
        }
    }
}

/// How stored feedback vectors are consumed: verbatim log-probabilities, or
/// exponentiated into probabilities (the internally consistent variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackSpace {
    LogProb,
    Prob,
}

impl fmt::Display for FeedbackSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackSpace::LogProb => "logprob",
            FeedbackSpace::Prob => "prob",
        })
    }
}

impl FromStr for FeedbackSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<FeedbackSpace> {
        match s {
            "logprob" => Ok(FeedbackSpace::LogProb),
            "prob" => Ok(FeedbackSpace::Prob),
            _ => Err(Error::Config(format!(
                "unknown feedback space `{s}` (logprob or prob)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtlConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub word_dim: usize,
    pub char: CharCnnConfig,
    pub dropout: f64,
    pub head: HeadType,
    /// MER output feeds MEN (through `V`).
    pub feedback_mer_to_men: bool,
    /// MEN output feeds MER (through `U`).
    pub feedback_men_to_mer: bool,
    pub feedback_space: FeedbackSpace,
    pub train_word_embeddings: bool,
}

impl Default for MtlConfig {
    fn default() -> Self {
        MtlConfig {
            layers: 3,
            hidden_dim: 100,
            word_dim: 100,
            char: CharCnnConfig::default(),
            dropout: 0.5,
            head: HeadType::Crf,
            feedback_mer_to_men: true,
            feedback_men_to_mer: true,
            feedback_space: FeedbackSpace::LogProb,
            train_word_embeddings: true,
        }
    }
}

impl MtlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.word_dim == 0 {
            return Err(Error::Config(
                "layers, hidden_dim, and word_dim must be positive".into(),
            ));
        }
        self.char.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidDropoutRate(self.dropout));
        }
        Ok(())
    }

    /// Is feedback into `consumer` enabled?
    pub fn feedback_into(&self, consumer: TaskId) -> bool {
        match consumer {
            TaskId::Mer => self.feedback_men_to_mer,
            TaskId::Men => self.feedback_mer_to_men,
        }
    }
}

/// Row counts the parameter shapes depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub words: usize,
    pub chars: usize,
    pub l_mer: usize,
    pub l_men: usize,
}

impl ModelDims {
    pub fn of(vocab: &Vocabularies) -> ModelDims {
        ModelDims {
            words: vocab.words.len(),
            chars: vocab.chars.len(),
            l_mer: vocab.mer_tags.len(),
            l_men: vocab.men_tags.len(),
        }
    }

    pub fn l(&self, task: TaskId) -> usize {
        match task {
            TaskId::Mer => self.l_mer,
            TaskId::Men => self.l_men,
        }
    }
}

const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Per-tensor gradient-norm ceilings applied in `train_step` before the
/// optimizer. Cached log-probabilities are unbounded as the model sharpens,
/// so gradients into U/V scale with them; at a fixed learning rate an
/// unclipped step along the feedback matrices eventually overshoots and the
/// mutual-feedback loop diverges. The feedback ceiling is tighter so an
/// oversized U/V gradient cannot outrun the encoder pathway it modulates.
const GRAD_CLIP_NORM: f64 = 25.0;
const FEEDBACK_CLIP_NORM: f64 = 1.0;

/// Fraction of training-time feedback serves replaced by the uniform init
/// vector (see `train_step`). Independent of the encoder dropout rate: the
/// mixture must survive dropout-free training runs.
const FEEDBACK_DROP_RATE: f64 = 0.3;

fn grad_cap(name: &str) -> f64 {
    if name.starts_with("fb.") {
        FEEDBACK_CLIP_NORM
    } else {
        GRAD_CLIP_NORM
    }
}

/// Canonical parameter inventory: `(name, shape)` in a fixed order that also
/// fixes the RNG draw order at initialization.
pub fn expected_params(config: &MtlConfig, dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_dim;
    let f = config.char.num_filters;
    let mut out = vec![
        ("embed.word".to_string(), vec![dims.words, config.word_dim]),
        ("embed.char".to_string(), vec![dims.chars, config.char.char_dim]),
        (
            "cnn.w".to_string(),
            vec![config.char.window * config.char.char_dim, f],
        ),
        ("cnn.b".to_string(), vec![1, f]),
    ];
    for layer in 0..config.layers {
        let input = if layer == 0 { config.word_dim + f } else { 2 * h };
        for dir in ["fwd", "bwd"] {
            for gate in LSTM_GATES {
                out.push((format!("lstm{layer}.{dir}.w{gate}"), vec![input + h, h]));
            }
            for gate in LSTM_GATES {
                out.push((format!("lstm{layer}.{dir}.b{gate}"), vec![1, h]));
            }
        }
    }
    for task in TaskId::BOTH {
        let l = dims.l(task);
        out.push((format!("head.{}.w", task.key()), vec![4 * h, l]));
        out.push((format!("head.{}.b", task.key()), vec![1, l]));
        if config.head == HeadType::Crf {
            out.push((format!("head.{}.trans", task.key()), vec![l + 2, l + 2]));
        }
    }
    out.push(("fb.u".to_string(), vec![dims.l_men, 2 * h]));
    out.push(("fb.v".to_string(), vec![dims.l_mer, 2 * h]));
    out
}

fn zero_initialized(name: &str) -> bool {
    // fb.u / fb.v start at zero so the feedback branch opens as an exact
    // no-op (v ∘ v) and scales up only as the loss pulls it in; cached
    // log-probabilities are unbounded, and a random mapping of them
    // destabilizes the first post-cache epoch.
    name.ends_with(".trans")
        || name.ends_with(".b")
        || name.starts_with("fb.")
        || LSTM_GATES.iter().any(|g| name.ends_with(&format!(".b{g}")))
}

/// Fresh parameters: embedding rows uniform in `±√(3/dim)`, projection and
/// gate weights fan-in–scaled (`±√(3/rows)`), biases and CRF transitions
/// zero. `word_matrix` overrides the word embedding rows (pretrained
/// initialization).
pub fn init_params(
    config: &MtlConfig,
    dims: &ModelDims,
    word_matrix: Option<Tensor>,
    rng: &mut Rng,
) -> Result<ModelParams> {
    let mut params = ModelParams::new();
    for (name, shape) in expected_params(config, dims) {
        let tensor = if name == "embed.word" {
            match &word_matrix {
                Some(m) => {
                    if m.shape() != shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            op: "init_params: word matrix",
                            lhs: shape,
                            rhs: m.shape().to_vec(),
                        });
                    }
                    m.clone()
                }
                None => init_uniform_matrix(shape[0], shape[1], rng)?,
            }
        } else if name.starts_with("embed.") {
            init_uniform_matrix(shape[0], shape[1], rng)?
        } else if zero_initialized(&name) {
            Tensor::zeros(&shape)
        } else {
            init_weight(shape[0], shape[1], rng)?
        };
        params.insert(&name, tensor);
    }
    Ok(params)
}

/// The task whose loss updates this parameter, or `None` for the shared set.
pub fn param_task(name: &str) -> Option<TaskId> {
    if name.starts_with("head.mer.") || name == "fb.u" {
        Some(TaskId::Mer)
    } else if name.starts_with("head.men.") || name == "fb.v" {
        Some(TaskId::Men)
    } else {
        None
    }
}

/// Report group used by the gradient checker.
pub fn report_group(name: &str) -> String {
    if name.starts_with("embed.") {
        "embeddings".into()
    } else if name.starts_with("cnn.") {
        "char-cnn".into()
    } else if let Some(rest) = name.strip_prefix("lstm") {
        format!("lstm{}", rest.split('.').next().unwrap_or(""))
    } else if name.ends_with(".trans") {
        "crf-transitions".into()
    } else if name.starts_with("head.mer") {
        "head-mer".into()
    } else if name.starts_with("head.men") {
        "head-men".into()
    } else if name == "fb.u" {
        "fb-u".into()
    } else if name == "fb.v" {
        "fb-v".into()
    } else {
        "other".into()
    }
}

/// The uniform feedback initialization: every element exactly `1/|L|`.
pub fn init_feedback(l: usize) -> Result<Vec<f64>> {
    if l == 0 {
        return Err(Error::EmptyTagSet);
    }
    Ok(vec![1.0 / l as f64; l])
}

fn serve_feedback(stored: &[f64], space: FeedbackSpace) -> Vec<f64> {
    match space {
        FeedbackSpace::LogProb => stored.to_vec(),
        FeedbackSpace::Prob => stored.iter().map(|v| v.exp()).collect(),
    }
}

/// Per-(instance, token, producing task) store of head output vectors,
/// persisted across epochs. Absent entries serve the uniform initialization.
#[derive(Debug, Clone, Default)]
pub struct FeedbackCache {
    entries: BTreeMap<(usize, usize, TaskId), Vec<f64>>,
}

impl FeedbackCache {
    pub fn new() -> Self {
        FeedbackCache::default()
    }

    /// The vector served to the consuming task: the stored output of
    /// `producer` for this token (transformed per `space`), or `1/|L|`.
    pub fn served(
        &self,
        instance: usize,
        token: usize,
        producer: TaskId,
        l: usize,
        space: FeedbackSpace,
    ) -> Result<Vec<f64>> {
        match self.entries.get(&(instance, token, producer)) {
            Some(stored) => Ok(serve_feedback(stored, space)),
            None => init_feedback(l),
        }
    }

    pub fn put(&mut self, instance: usize, token: usize, producer: TaskId, y: Vec<f64>) {
        self.entries.insert((instance, token, producer), y);
    }

    /// Overwrite all of `producer`'s entries for one sentence with fresh
    /// per-token output rows.
    pub fn store_sentence(&mut self, instance: usize, producer: TaskId, logprobs: &Tensor) {
        for t in 0..logprobs.rows() {
            self.put(instance, t, producer, logprobs.row_slice(t).to_vec());
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `v ∘ (v + y·M)`: the feedback-modified head input, twice as wide as `v`.
pub fn feedback_combine(tape: &Tape, v: Var, y: Var, m: Var) -> Result<Var> {
    let mapped = tape.matmul(y, m)?;
    let inner = tape.add(v, mapped)?;
    tape.concat_cols(&[v, inner])
}

/// A sentence resolved to vocabulary ids.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    pub word_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
}

/// All parameters as leaves on one tape.
pub struct TapeVars {
    by_name: BTreeMap<String, Var>,
}

impl TapeVars {
    pub fn new(tape: &Tape, params: &ModelParams) -> TapeVars {
        let by_name = params
            .iter()
            .map(|(name, tensor)| (name.to_string(), tape.leaf_arc(Arc::clone(tensor))))
            .collect();
        TapeVars { by_name }
    }

    pub fn var(&self, name: &str) -> Var {
        self.by_name[name]
    }

    pub fn names(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.by_name.iter()
    }

    fn lstm(&self, layer: usize, dir: &str) -> LstmDirVars {
        let g = |kind: &str| self.var(&format!("lstm{layer}.{dir}.{kind}"));
        LstmDirVars {
            wi: g("wi"),
            wf: g("wf"),
            wo: g("wo"),
            wg: g("wg"),
            bi: g("bi"),
            bf: g("bf"),
            bo: g("bo"),
            bg: g("bg"),
        }
    }

    fn cnn(&self) -> CharCnnVars {
        CharCnnVars {
            embed: self.var("embed.char"),
            filter: self.var("cnn.w"),
            bias: self.var("cnn.b"),
        }
    }
}

/// Shared per-token features `v_i^k` (`[1 × 2·hidden]` each), computed once
/// per sentence and consumed by both heads.
pub fn shared_encode(
    tape: &Tape,
    vars: &TapeVars,
    config: &MtlConfig,
    enc: &EncodedSentence,
    rng: &mut Rng,
    training: bool,
) -> Result<Vec<Var>> {
    if enc.word_ids.len() != enc.char_ids.len() {
        return Err(Error::ShapeMismatch {
            op: "shared_encode",
            lhs: vec![enc.word_ids.len()],
            rhs: vec![enc.char_ids.len()],
        });
    }
    let cnn = vars.cnn();
    let word_embed = vars.var("embed.word");
    let xs = enc
        .word_ids
        .iter()
        .zip(&enc.char_ids)
        .map(|(&wid, cids)| {
            word_repr_ids(
                tape,
                wid,
                cids,
                word_embed,
                &config.char,
                &cnn,
                config.dropout,
                rng,
                training,
            )
        })
        .collect::<Result<Vec<Var>>>()?;
    let layers: Vec<(LstmDirVars, LstmDirVars)> = (0..config.layers)
        .map(|l| (vars.lstm(l, "fwd"), vars.lstm(l, "bwd")))
        .collect();
    bilstm_encode(tape, &xs, &layers, config.dropout, rng, training)
}

/// One task head's forward results for a sentence.
pub struct ForwardPass {
    /// Greedy: per-token log-probabilities; CRF: linear emissions. Feeds the loss.
    pub scores: Var,
    pub trans: Option<Var>,
    /// The task's output vectors `y^i` (log-probabilities in both head types).
    pub logprobs: Tensor,
    pub tags: Vec<usize>,
}

/// Apply one task's head on the shared features with explicit per-token
/// feedback vectors from the other task.
pub fn head_forward(
    tape: &Tape,
    vars: &TapeVars,
    config: &MtlConfig,
    task: TaskId,
    vks: &[Var],
    feedback: &[Vec<f64>],
) -> Result<ForwardPass> {
    if feedback.len() != vks.len() {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            lhs: vec![vks.len()],
            rhs: vec![feedback.len()],
        });
    }
    let m = vars.var(match task {
        TaskId::Mer => "fb.u",
        TaskId::Men => "fb.v",
    });
    let combined = vks
        .iter()
        .zip(feedback)
        .map(|(&v, y)| feedback_combine(tape, v, tape.leaf(Tensor::row(y.clone())), m))
        .collect::<Result<Vec<Var>>>()?;
    let features = tape.stack_rows(&combined)?;
    let w = vars.var(&format!("head.{}.w", task.key()));
    let b = vars.var(&format!("head.{}.b", task.key()));
    let scores = tape.add(tape.matmul(features, w)?, b)?;
    match config.head {
        HeadType::Greedy => {
            let lp = tape.log_softmax_rows(scores)?;
            let value = (*tape.value(lp)).clone();
            let tags = greedy_decode(&value);
            Ok(ForwardPass {
                scores: lp,
                trans: None,
                logprobs: value,
                tags,
            })
        }
        HeadType::Crf => {
            let trans = vars.var(&format!("head.{}.trans", task.key()));
            let em = tape.value(scores);
            let tr = tape.value(trans);
            let logprobs = crf_token_logprobs(&em, &tr)?;
            let (tags, _) = crf_viterbi(&em, &tr)?;
            Ok(ForwardPass {
                scores,
                trans: Some(trans),
                logprobs,
                tags,
            })
        }
    }
}

/// The task loss on the tape: summed cross-entropy (greedy) or CRF NLL.
pub fn task_loss(tape: &Tape, config: &MtlConfig, pass: &ForwardPass, gold: &[usize]) -> Result<Var> {
    match config.head {
        HeadType::Greedy => greedy_nll(tape, pass.scores, gold),
        HeadType::Crf => crf_nll_tape(tape, pass.scores, pass.trans.expect("crf trans"), gold),
    }
}

fn uniform_feedback(n: usize, l: usize) -> Result<Vec<Vec<f64>>> {
    let row = init_feedback(l)?;
    Ok(vec![row; n])
}

/// Joint prediction for one sentence.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mer_tags: Vec<usize>,
    pub men_tags: Vec<usize>,
    pub mer_logprobs: Tensor,
    pub men_logprobs: Tensor,
}

/// Inference with explicit feedback rounds. Round 0 runs both heads with
/// uniform feedback; each later round re-runs them consuming the previous
/// round's output vectors of the other task. Dropout is disabled.
pub fn predict_encoded(
    params: &ModelParams,
    config: &MtlConfig,
    dims: &ModelDims,
    enc: &EncodedSentence,
    rounds: usize,
) -> Result<Prediction> {
    let tape = Tape::new();
    let vars = TapeVars::new(&tape, params);
    let mut rng = Rng::new(0); // inference draws nothing
    let vks = shared_encode(&tape, &vars, config, enc, &mut rng, false)?;
    let n = vks.len();
    let mut current: BTreeMap<TaskId, ForwardPass> = BTreeMap::new();
    for round in 0..=rounds {
        let mut next = BTreeMap::new();
        for task in TaskId::BOTH {
            let producer = task.other();
            let fb = if round > 0 && config.feedback_into(task) {
                let prev = &current[&producer];
                (0..n)
                    .map(|i| serve_feedback(prev.logprobs.row_slice(i), config.feedback_space))
                    .collect()
            } else {
                uniform_feedback(n, dims.l(producer))?
            };
            next.insert(task, head_forward(&tape, &vars, config, task, &vks, &fb)?);
        }
        current = next;
    }
    let mer = current.remove(&TaskId::Mer).expect("mer pass");
    let men = current.remove(&TaskId::Men).expect("men pass");
    Ok(Prediction {
        mer_tags: mer.tags,
        men_tags: men.tags,
        mer_logprobs: mer.logprobs,
        men_logprobs: men.logprobs,
    })
}

/// Sum of both task losses (uniform feedback, dropout off) as a plain value
/// of the parameters — the function the gradient checker probes.
pub fn joint_loss_value(
    params: &ModelParams,
    config: &MtlConfig,
    dims: &ModelDims,
    enc: &EncodedSentence,
    gold_mer: &[usize],
    gold_men: &[usize],
) -> Result<f64> {
    let (loss, _, _) = joint_forward(params, config, dims, enc, gold_mer, gold_men)?;
    Ok(loss)
}

/// Joint loss plus its gradients for every parameter (both heads contribute,
/// so `U` and `V` both receive gradients).
pub fn joint_loss_grads(
    params: &ModelParams,
    config: &MtlConfig,
    dims: &ModelDims,
    enc: &EncodedSentence,
    gold_mer: &[usize],
    gold_men: &[usize],
) -> Result<(f64, ParamGrads)> {
    let (loss, tape, vars) = joint_forward(params, config, dims, enc, gold_mer, gold_men)?;
    let loss_var = vars.loss;
    let mut grads = tape.backward(loss_var)?;
    let mut out = ParamGrads::new();
    for (name, &var) in vars.vars.names() {
        let g = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(params.get(name).expect("known param").shape()));
        out.insert(name.clone(), g);
    }
    Ok((loss, out))
}

struct JointVars {
    vars: TapeVars,
    loss: Var,
}

fn joint_forward(
    params: &ModelParams,
    config: &MtlConfig,
    dims: &ModelDims,
    enc: &EncodedSentence,
    gold_mer: &[usize],
    gold_men: &[usize],
) -> Result<(f64, Tape, JointVars)> {
    let tape = Tape::new();
    let vars = TapeVars::new(&tape, params);
    let mut rng = Rng::new(0);
    let vks = shared_encode(&tape, &vars, config, enc, &mut rng, false)?;
    let n = vks.len();
    let mut total: Option<Var> = None;
    for (task, gold) in [(TaskId::Mer, gold_mer), (TaskId::Men, gold_men)] {
        let fb = uniform_feedback(n, dims.l(task.other()))?;
        let pass = head_forward(&tape, &vars, config, task, &vks, &fb)?;
        let loss = task_loss(&tape, config, &pass, gold)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let loss_var = total.expect("two tasks");
    let loss = tape.value(loss_var).scalar_value();
    Ok((loss, tape, JointVars { vars, loss: loss_var }))
}

/// The trained artifact: config, vocabularies, and parameters.
#[derive(Debug, Clone)]
pub struct MtlModel {
    pub config: MtlConfig,
    pub vocab: Vocabularies,
    pub params: ModelParams,
}

impl MtlModel {
    /// Initialize a fresh model. When a pretrained table is given, vocabulary
    /// words found in it (exact, then lowercase) copy its vectors; the rest
    /// are drawn uniformly.
    pub fn new(
        config: MtlConfig,
        vocab: Vocabularies,
        pretrained: Option<&EmbeddingTable>,
        rng: &mut Rng,
    ) -> Result<MtlModel> {
        config.validate()?;
        let dims = ModelDims::of(&vocab);
        let word_matrix = match pretrained {
            Some(table) => {
                if table.dim != config.word_dim {
                    return Err(Error::Config(format!(
                        "embedding dim {} does not match word_dim {}",
                        table.dim, config.word_dim
                    )));
                }
                Some(pretrained_word_matrix(&vocab, table, config.word_dim, rng)?)
            }
            None => None,
        };
        let params = init_params(&config, &dims, word_matrix, rng)?;
        Ok(MtlModel {
            config,
            vocab,
            params,
        })
    }

    /// Rebuild from checkpoint parts, validating shapes against the config.
    pub fn from_parts(
        config: MtlConfig,
        vocab: Vocabularies,
        params: ModelParams,
    ) -> Result<MtlModel> {
        config.validate()?;
        let dims = ModelDims::of(&vocab);
        let expected = expected_params(&config, &dims);
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let tensor = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
        }
        Ok(MtlModel {
            config,
            vocab,
            params,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::of(&self.vocab)
    }

    pub fn tag_set(&self, task: TaskId) -> &TagSet {
        self.vocab.tags(task)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> EncodedSentence {
        EncodedSentence {
            word_ids: tokens.iter().map(|t| self.vocab.words.id(t.as_ref())).collect(),
            char_ids: tokens
                .iter()
                .map(|t| self.vocab.chars.word_ids(t.as_ref()))
                .collect(),
        }
    }

    /// Does a step on `task` update this parameter?
    pub fn updates(&self, task: TaskId, name: &str) -> bool {
        if name == "embed.word" && !self.config.train_word_embeddings {
            return false;
        }
        param_task(name).is_none_or(|owner| owner == task)
    }

    pub fn predict<S: AsRef<str>>(&self, tokens: &[S], rounds: usize) -> Result<Prediction> {
        let enc = self.encode_tokens(tokens);
        predict_encoded(&self.params, &self.config, &self.dims(), &enc, rounds)
    }
}

fn pretrained_word_matrix(
    vocab: &Vocabularies,
    table: &EmbeddingTable,
    dim: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(vocab.words.len() * dim);
    for word in vocab.words.words() {
        if table.vocab.contains_exact(word) {
            data.extend_from_slice(table.embedding_vector(word));
            continue;
        }
        let lower = word.to_lowercase();
        if table.vocab.contains_exact(&lower) {
            data.extend_from_slice(table.embedding_vector(&lower));
            continue;
        }
        data.extend_from_slice(init_uniform(dim, rng)?.data());
    }
    Tensor::new(vec![vocab.words.len(), dim], data)
}

/// One training-log line: `step task instance_id loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub task: TaskId,
    pub instance: usize,
    pub loss: f64,
}

/// One asynchronous step: forward `task`'s head on the instance with cached
/// feedback, backprop its loss, update the shared encoder plus `f_task` and
/// its feedback matrix, and overwrite the cache with the fresh outputs.
pub fn train_step(
    model: &mut MtlModel,
    sentence: &Sentence,
    task: TaskId,
    cache: &mut FeedbackCache,
    opt: &mut OptimizerState,
    rng: &mut Rng,
) -> Result<f64> {
    let labels = sentence.tags(task).ok_or_else(|| {
        Error::Config(format!("sentence {} has no {task} tags", sentence.id))
    })?;
    let gold = model.tag_set(task).encode(labels)?;
    let enc = model.encode_tokens(&sentence.tokens);
    let dims = model.dims();
    let producer = task.other();
    let l_producer = dims.l(producer);
    let feedback_on = model.config.feedback_into(task);
    let space = model.config.feedback_space;
    let fb = (0..sentence.len())
        .map(|i| {
            // Per-token feedback dropout: a fraction of training serves see
            // the uniform init vector in place of the cached one, so the
            // head stays accurate when feedback is uninformative — the
            // regime every inference pass starts from (round 0). Without
            // it the heads co-adapt to the cached log-probabilities, which
            // on a linked corpus all but encode the other task's gold.
            if feedback_on && rng.uniform() >= FEEDBACK_DROP_RATE {
                cache.served(sentence.id, i, producer, l_producer, space)
            } else {
                init_feedback(l_producer)
            }
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;

    let tape = Tape::new();
    let vars = TapeVars::new(&tape, &model.params);
    let vks = shared_encode(&tape, &vars, &model.config, &enc, rng, true)?;
    let pass = head_forward(&tape, &vars, &model.config, task, &vks, &fb)?;
    let loss_var = task_loss(&tape, &model.config, &pass, &gold)?;
    let loss = tape.value(loss_var).scalar_value();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            param: format!("train_step({task})"),
            index: sentence.id,
        });
    }

    let mut grads = tape.backward(loss_var)?;
    let mut step_grads = ParamGrads::new();
    let train_embeddings = model.config.train_word_embeddings;
    for (name, &var) in vars.names() {
        let included = if name == "embed.word" && !train_embeddings {
            false
        } else {
            param_task(name).is_none_or(|owner| owner == task)
        };
        if included {
            if let Some(g) = grads.take(var) {
                step_grads.insert(name.clone(), g);
            }
        }
    }
    clip_grads_per_tensor(&mut step_grads, grad_cap)?;
    sgd_momentum_step_subset(&mut model.params, &step_grads, opt, |name| {
        step_grads.contains_key(name)
    })?;
    cache.store_sentence(sentence.id, task, &pass.logprobs);
    Ok(loss)
}

fn check_task_stream(data: &[Sentence], task: TaskId, tags: &TagSet) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(match task {
            TaskId::Mer => "D_MER",
            TaskId::Men => "D_MEN",
        }));
    }
    for s in data {
        let labels = s.tags(task).ok_or_else(|| {
            Error::Config(format!("sentence {} has no {task} tags", s.id))
        })?;
        tags.encode(labels)?;
    }
    Ok(())
}

/// The asynchronous protocol: per epoch, `|D_MER| + |D_MEN|` steps, each
/// sampling a task uniformly and an instance from its pool without
/// replacement (with-replacement fallback once a pool empties). The cache
/// persists across epochs unless `reset_cache_per_epoch` is set.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut MtlModel,
    d_mer: &[Sentence],
    d_men: &[Sentence],
    epochs: usize,
    opt: &mut OptimizerState,
    cache: &mut FeedbackCache,
    reset_cache_per_epoch: bool,
    rng: &mut Rng,
) -> Result<Vec<StepRecord>> {
    check_task_stream(d_mer, TaskId::Mer, model.tag_set(TaskId::Mer))?;
    check_task_stream(d_men, TaskId::Men, model.tag_set(TaskId::Men))?;
    let mut records = Vec::with_capacity(epochs * (d_mer.len() + d_men.len()));
    let mut step = 0;
    for _ in 0..epochs {
        if reset_cache_per_epoch {
            cache.clear();
        }
        let mut pools: [Vec<usize>; 2] = [
            (0..d_mer.len()).collect(),
            (0..d_men.len()).collect(),
        ];
        rng.shuffle(&mut pools[0]);
        rng.shuffle(&mut pools[1]);
        for _ in 0..d_mer.len() + d_men.len() {
            let task = if rng.below(2) == 0 { TaskId::Mer } else { TaskId::Men };
            let (data, pool) = match task {
                TaskId::Mer => (d_mer, &mut pools[0]),
                TaskId::Men => (d_men, &mut pools[1]),
            };
            let idx = match pool.pop() {
                Some(i) => i,
                None => rng.below(data.len()),
            };
            let loss = train_step(model, &data[idx], task, cache, opt, rng)?;
            records.push(StepRecord {
                step,
                task,
                instance: data[idx].id,
                loss,
            });
            step += 1;
        }
    }
    Ok(records)
}

/// Single-task baseline: `|D|` steps per epoch on one task only. The other
/// head and its feedback matrix are never touched.
pub fn train_single_task(
    model: &mut MtlModel,
    data: &[Sentence],
    task: TaskId,
    epochs: usize,
    opt: &mut OptimizerState,
    cache: &mut FeedbackCache,
    rng: &mut Rng,
) -> Result<Vec<StepRecord>> {
    check_task_stream(data, task, model.tag_set(task))?;
    let mut records = Vec::with_capacity(epochs * data.len());
    let mut step = 0;
    for _ in 0..epochs {
        let mut pool: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut pool);
        for &idx in &pool {
            let loss = train_step(model, &data[idx], task, cache, opt, rng)?;
            records.push(StepRecord {
                step,
                task,
                instance: data[idx].id,
                loss,
            });
            step += 1;
        }
    }
    Ok(records)
}

// --- gradient checking -----------------------------------------------------

/// A self-contained desk-scale instance for the gradient checker.
pub struct GradcheckInstance {
    pub config: MtlConfig,
    pub dims: ModelDims,
    pub params: ModelParams,
    pub enc: EncodedSentence,
    pub gold_mer: Vec<usize>,
    pub gold_men: Vec<usize>,
}

/// The standard tiny instance: 2 tokens, |L_MER|=3, |L_MEN|=4, hidden 8, k=2.
pub fn gradcheck_instance(head: HeadType, seed: u64) -> Result<GradcheckInstance> {
    let config = MtlConfig {
        layers: 2,
        hidden_dim: 8,
        word_dim: 6,
        char: CharCnnConfig {
            char_dim: 4,
            window: 3,
            num_filters: 5,
        },
        dropout: 0.0,
        head,
        ..MtlConfig::default()
    };
    let dims = ModelDims {
        words: 7,
        chars: 9,
        l_mer: 3,
        l_men: 4,
    };
    let mut rng = Rng::new(seed);
    let mut params = init_params(&config, &dims, None, &mut rng)?;
    // Training starts the feedback matrices at zero; the check should probe
    // a generic point so the y·M path carries gradient everywhere.
    let two_h = 2 * config.hidden_dim;
    *params.get_mut("fb.u")? = init_weight(dims.l_men, two_h, &mut rng)?;
    *params.get_mut("fb.v")? = init_weight(dims.l_mer, two_h, &mut rng)?;
    Ok(GradcheckInstance {
        config,
        dims,
        params,
        enc: EncodedSentence {
            word_ids: vec![2, 5],
            char_ids: vec![vec![2, 3, 4], vec![5]],
        },
        gold_mer: vec![1, 2],
        gold_men: vec![3, 0],
    })
}

/// Compare backprop against central differences, reporting the max relative
/// error per parameter group. `corrupt` perturbs one named parameter's
/// analytic gradient (negative-control hook).
pub fn gradcheck_run(
    inst: &GradcheckInstance,
    eps: f64,
    corrupt: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    let (_, mut analytic) = joint_loss_grads(
        &inst.params,
        &inst.config,
        &inst.dims,
        &inst.enc,
        &inst.gold_mer,
        &inst.gold_men,
    )?;
    if let Some(name) = corrupt {
        let g = analytic
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        g.data_mut()[0] += 1.0;
    }
    let numeric = finite_diff_grad(
        |p| {
            joint_loss_value(
                p,
                &inst.config,
                &inst.dims,
                &inst.enc,
                &inst.gold_mer,
                &inst.gold_men,
            )
        },
        &inst.params,
        eps,
    )?;

    let mut group_order: Vec<String> = Vec::new();
    let mut by_group: BTreeMap<String, (ParamGrads, ParamGrads)> = BTreeMap::new();
    for (name, _) in expected_params(&inst.config, &inst.dims) {
        let group = report_group(&name);
        if !group_order.contains(&group) {
            group_order.push(group.clone());
        }
        let entry = by_group.entry(group).or_default();
        entry.0.insert(name.clone(), analytic[&name].clone());
        entry.1.insert(name.clone(), numeric[&name].clone());
    }
    Ok(group_order
        .into_iter()
        .map(|g| {
            let (a, n) = &by_group[&g];
            let err = max_relative_error(a, n);
            (g, err)
        })
        .collect())
}

// --- checkpoint ------------------------------------------------------------

const CHECKPOINT_HEADER: &str = "MTLSEQLAB v1";

/// Serialize the model to the versioned text container.
pub fn checkpoint_to_string(model: &MtlModel) -> String {
    let c = &model.config;
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    let mut cfg = |k: &str, v: String| {
        out.push_str(&format!("config {k} {v}\n"));
    };
    cfg("layers", c.layers.to_string());
    cfg("hidden_dim", c.hidden_dim.to_string());
    cfg("word_dim", c.word_dim.to_string());
    cfg("char_dim", c.char.char_dim.to_string());
    cfg("window", c.char.window.to_string());
    cfg("num_filters", c.char.num_filters.to_string());
    cfg("dropout", c.dropout.to_string());
    cfg("head", c.head.to_string());
    cfg("feedback_mer_to_men", c.feedback_mer_to_men.to_string());
    cfg("feedback_men_to_mer", c.feedback_men_to_mer.to_string());
    cfg("feedback_space", c.feedback_space.to_string());
    cfg(
        "train_word_embeddings",
        c.train_word_embeddings.to_string(),
    );
    for task in TaskId::BOTH {
        let labels = model.vocab.tags(task).labels();
        out.push_str(&format!("tags {task} {}\n", labels.len()));
        for l in labels {
            out.push_str(l);
            out.push('\n');
        }
    }
    let words = &model.vocab.words.words()[2..];
    out.push_str(&format!("words {}\n", words.len()));
    for w in words {
        out.push_str(w);
        out.push('\n');
    }
    let chars = &model.vocab.chars.chars()[2..];
    out.push_str(&format!("chars {}\n", chars.len()));
    for ch in chars {
        out.push_str(&(*ch as u32).to_string());
        out.push('\n');
    }
    for (name, tensor) in model.params.iter() {
        let shape = tensor.shape();
        out.push_str(&format!("param {name} {} {}\n", shape[0], shape[1]));
        for r in 0..shape[0] {
            let row: Vec<String> = tensor.row_slice(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(model: &MtlModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_to_string(model))?;
    Ok(())
}

fn ck_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("line {line}: {}", msg.into()))
}

/// Parse the text container back into a model, validating shapes.
pub fn checkpoint_from_str(text: &str) -> Result<MtlModel> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    if header.trim_end() != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!(
            "bad header `{header}` (expected `{CHECKPOINT_HEADER}`)"
        )));
    }
    let mut config_kv: BTreeMap<String, String> = BTreeMap::new();
    let mut tag_labels: BTreeMap<TaskId, Vec<String>> = BTreeMap::new();
    let mut words: Vec<String> = Vec::new();
    let mut chars: Vec<char> = Vec::new();
    let mut params = ModelParams::new();
    let mut saw_end = false;

    while let Some((idx, raw)) = lines.next() {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        match fields[0] {
            "config" => {
                if fields.len() != 3 {
                    return Err(ck_err(line_no, "config lines are `config key value`"));
                }
                config_kv.insert(fields[1].to_string(), fields[2].to_string());
            }
            "tags" => {
                if fields.len() != 3 {
                    return Err(ck_err(line_no, "tag sections are `tags TASK count`"));
                }
                let task: TaskId = fields[1].parse()?;
                let count: usize = fields[2]
                    .parse()
                    .map_err(|_| ck_err(line_no, "bad tag count"))?;
                let mut labels = Vec::with_capacity(count);
                for _ in 0..count {
                    let (i, l) = lines
                        .next()
                        .ok_or_else(|| ck_err(line_no, "truncated tag section"))?;
                    let _ = i;
                    labels.push(l.trim_end().to_string());
                }
                tag_labels.insert(task, labels);
            }
            "words" => {
                let count: usize = fields
                    .get(1)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| ck_err(line_no, "bad word count"))?;
                for _ in 0..count {
                    let (_, w) = lines
                        .next()
                        .ok_or_else(|| ck_err(line_no, "truncated word section"))?;
                    words.push(w.trim_end().to_string());
                }
            }
            "chars" => {
                let count: usize = fields
                    .get(1)
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| ck_err(line_no, "bad char count"))?;
                for _ in 0..count {
                    let (i, c) = lines
                        .next()
                        .ok_or_else(|| ck_err(line_no, "truncated char section"))?;
                    let code: u32 = c
                        .trim_end()
                        .parse()
                        .map_err(|_| ck_err(i + 1, "bad char codepoint"))?;
                    chars.push(
                        char::from_u32(code)
                            .ok_or_else(|| ck_err(i + 1, "invalid codepoint"))?,
                    );
                }
            }
            "param" => {
                if fields.len() != 4 {
                    return Err(ck_err(line_no, "param lines are `param name rows cols`"));
                }
                let name = fields[1];
                let rows: usize = fields[2]
                    .parse()
                    .map_err(|_| ck_err(line_no, "bad row count"))?;
                let cols: usize = fields[3]
                    .parse()
                    .map_err(|_| ck_err(line_no, "bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (i, row) = lines
                        .next()
                        .ok_or_else(|| ck_err(line_no, format!("truncated parameter `{name}`")))?;
                    for v in row.trim_end().split(' ') {
                        data.push(v.parse::<f64>().map_err(|_| {
                            ck_err(i + 1, format!("bad value `{v}` in `{name}`"))
                        })?);
                    }
                }
                if data.len() != rows * cols {
                    return Err(ck_err(
                        line_no,
                        format!("parameter `{name}` has {} values, expected {}", data.len(), rows * cols),
                    ));
                }
                params.insert(name, Tensor::new(vec![rows, cols], data)?);
            }
            "end" => {
                saw_end = true;
                break;
            }
            other => return Err(ck_err(line_no, format!("unknown section `{other}`"))),
        }
    }
    if !saw_end {
        return Err(Error::Checkpoint("missing `end` marker".into()));
    }

    let get = |k: &str| -> Result<&String> {
        config_kv
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing config key `{k}`")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad config value for `{k}`")))
    };
    let parse_bool = |k: &str| -> Result<bool> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad config value for `{k}`")))
    };
    let config = MtlConfig {
        layers: parse_usize("layers")?,
        hidden_dim: parse_usize("hidden_dim")?,
        word_dim: parse_usize("word_dim")?,
        char: CharCnnConfig {
            char_dim: parse_usize("char_dim")?,
            window: parse_usize("window")?,
            num_filters: parse_usize("num_filters")?,
        },
        dropout: get("dropout")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad config value for `dropout`".into()))?,
        head: get("head")?.parse()?,
        feedback_mer_to_men: parse_bool("feedback_mer_to_men")?,
        feedback_men_to_mer: parse_bool("feedback_men_to_mer")?,
        feedback_space: get("feedback_space")?.parse()?,
        train_word_embeddings: parse_bool("train_word_embeddings")?,
    };
    let mer_labels = tag_labels
        .remove(&TaskId::Mer)
        .ok_or_else(|| Error::Checkpoint("missing MER tag section".into()))?;
    let men_labels = tag_labels
        .remove(&TaskId::Men)
        .ok_or_else(|| Error::Checkpoint("missing MEN tag section".into()))?;
    let vocab = Vocabularies {
        words: crate::corpus::WordVocab::from_tokens(words.iter()),
        chars: crate::corpus::CharVocab::from_chars(chars),
        mer_tags: TagSet::from_labels(TaskId::Mer, mer_labels)?,
        men_tags: TagSet::from_labels(TaskId::Men, men_labels)?,
    };
    MtlModel::from_parts(config, vocab, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MtlModel> {
    let text = fs::read_to_string(path)?;
    checkpoint_from_str(&text)
}
