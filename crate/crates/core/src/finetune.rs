//! Downstream adaptation: task files, source-prompt assignment
//! (none/manual/auto/random), source prediction, and fine-tuning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::corpus::CorpusRegistry;
use crate::error::{Error, Result};
use crate::eval::{score_rows, ScoreRow};
use crate::model::{round_f32, Architecture, ModelState, TokenBatch};
use crate::optim::{AdamConfig, AdamState};
use crate::pretrain::{causal_labels, Placement, Prompter, PromptedSample, SpTokenMode};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, BOS, EOS, MASK, SEP};

// ---------------------------------------------------------------------------
// Source prediction

fn no_knowledge() -> Error {
    Error::Data("model has no source knowledge".into())
}

fn masked_prompt(prompter: &Prompter, body: &[u32], k: usize) -> (PromptedSample, Vec<u32>) {
    let s = prompter.prompt(body, k);
    let mut input = s.tokens.clone();
    for &p in &s.sp.as_ref().unwrap().sp_positions {
        input[p] = MASK;
    }
    (s, input)
}

fn slot_row(model: &ModelState, prompter: &Prompter, body: &[u32], first: u32) -> ScoreRow {
    let (s, input) = masked_prompt(prompter, body, 0);
    let sp = s.sp.unwrap();
    match model.config.architecture {
        Architecture::EncoderOnly => {
            let mut labels = vec![None; input.len()];
            labels[sp.sp_positions[0]] = Some(first);
            ScoreRow {
                src: input,
                dec: None,
                labels,
            }
        }
        Architecture::EncoderDecoder => ScoreRow {
            src: input,
            dec: Some(vec![MASK]),
            labels: vec![Some(first)],
        },
        Architecture::DecoderOnly => {
            // [BOS] body [SEP]: the next token is the post-body prompt.
            let mut src = vec![BOS];
            src.extend_from_slice(body);
            src.push(SEP);
            let mut labels = vec![None; src.len()];
            *labels.last_mut().unwrap() = Some(first);
            ScoreRow {
                src,
                dec: None,
                labels,
            }
        }
    }
}

/// Row whose labelled log-likelihood scores candidate source `k`.
fn candidate_row(model: &ModelState, prompter: &Prompter, body: &[u32], k: usize) -> ScoreRow {
    let name = prompter.prompt_tokens(k);
    match (model.config.architecture, prompter.placement()) {
        (Architecture::EncoderOnly, _) => {
            let (s, input) = masked_prompt(prompter, body, k);
            let mut labels = vec![None; input.len()];
            for &p in &s.sp.unwrap().sp_positions {
                labels[p] = Some(s.tokens[p]);
            }
            ScoreRow {
                src: input,
                dec: None,
                labels,
            }
        }
        (Architecture::EncoderDecoder, _) => {
            let (_, input) = masked_prompt(prompter, body, k);
            let mut dec = Vec::new();
            let mut labels = Vec::new();
            for &t in name {
                dec.extend([MASK, t]);
                labels.extend([Some(t), None]);
            }
            ScoreRow {
                src: input,
                dec: Some(dec),
                labels,
            }
        }
        (Architecture::DecoderOnly, Placement::End) => {
            let mut src = vec![BOS];
            src.extend_from_slice(body);
            src.push(SEP);
            let mut labels = vec![None; src.len()];
            for &t in name {
                *labels.last_mut().unwrap() = Some(t);
                src.push(t);
                labels.push(None);
            }
            ScoreRow {
                src,
                dec: None,
                labels,
            }
        }
        (Architecture::DecoderOnly, Placement::Start) => {
            let s = prompter.prompt(body, k).with_prefix(BOS);
            let (labels, _) = causal_labels(&s);
            ScoreRow {
                src: s.tokens,
                dec: None,
                labels,
            }
        }
    }
}

/// Predicted source index for each body.
///
/// MLM-family models fill a masked prompt (`[MASK][SEP]t`); causal models
/// with end placement read the token after `t[SEP]`; causal models with
/// start placement pick the source whose prompt makes `[SEP]t` most
/// likely.
pub fn predict_sources(
    model: &ModelState,
    vocab: &Vocabulary,
    bodies: &[Vec<u32>],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let st = model
        .source_training
        .as_ref()
        .filter(|s| s.knows_sources())
        .ok_or_else(no_knowledge)?;
    let prompter = Prompter::new(vocab, st.placement, st.token_mode)?;
    let m = vocab.num_sources();
    let single_slot = st.token_mode == SpTokenMode::Reserved
        && !(model.config.architecture == Architecture::DecoderOnly && st.placement == Placement::Start);
    if single_slot {
        let rows: Vec<ScoreRow> = bodies
            .iter()
            .map(|b| slot_row(model, &prompter, b, vocab.source_id(0)))
            .collect();
        let ids: Vec<u32> = (0..m).map(|k| vocab.source_id(k)).collect();
        let scores = score_rows(model, &rows, &ids, batch_size)?;
        return Ok(scores.iter().map(|s| argmax(&s[0].extra)).collect());
    }
    let rows: Vec<ScoreRow> = bodies
        .iter()
        .flat_map(|b| (0..m).map(|k| candidate_row(model, &prompter, b, k)).collect::<Vec<_>>())
        .collect();
    let scores = score_rows(model, &rows, &[], batch_size)?;
    Ok(scores
        .chunks(m)
        .map(|c| argmax(&c.iter().map(|s| s.iter().map(|p| p.logp).sum()).collect::<Vec<f64>>()))
        .collect())
}

/// Source token id (in `[5, 5 + m)`) predicted for one body.
pub fn predict_source(model: &ModelState, vocab: &Vocabulary, body: &[u32]) -> Result<u32> {
    let k = predict_sources(model, vocab, &[body.to_vec()], 1)?[0];
    Ok(vocab.source_id(k))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Anything that can name a source for a body; lets callers swap the
/// model for a stub.
pub trait SourcePredictor {
    fn predict(&self, bodies: &[Vec<u32>]) -> Result<Vec<usize>>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a ModelState,
    pub vocab: &'a Vocabulary,
    pub batch_size: usize,
}

impl SourcePredictor for ModelPredictor<'_> {
    fn predict(&self, bodies: &[Vec<u32>]) -> Result<Vec<usize>> {
        predict_sources(self.model, self.vocab, bodies, self.batch_size)
    }
}

// ---------------------------------------------------------------------------
// Source-prompt assignment

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpAssignment {
    None,
    /// One named source for the whole dataset.
    Manual(String),
    /// Per-example predicted source.
    Auto,
    /// Per-example uniform draw over sources.
    Random(u64),
}

impl SpAssignment {
    /// Parses `none`, `manual:<NAME>`, `auto`, `random` or `random:<seed>`.
    pub fn parse(s: &str, default_seed: u64) -> Result<Self> {
        match s.split_once(':') {
            None if s == "none" => Ok(SpAssignment::None),
            None if s == "auto" => Ok(SpAssignment::Auto),
            None if s == "random" => Ok(SpAssignment::Random(default_seed)),
            Some(("manual", name)) if !name.is_empty() => Ok(SpAssignment::Manual(name.to_string())),
            Some(("random", seed)) => seed
                .parse()
                .map(SpAssignment::Random)
                .map_err(|_| Error::Usage(format!("bad random seed {seed:?}"))),
            _ => Err(Error::Usage(format!(
                "unknown sp mode {s:?} (expected none, manual:<NAME>, auto or random)"
            ))),
        }
    }
}

impl fmt::Display for SpAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpAssignment::None => write!(f, "none"),
            SpAssignment::Manual(n) => write!(f, "manual:{n}"),
            SpAssignment::Auto => write!(f, "auto"),
            SpAssignment::Random(s) => write!(f, "random:{s}"),
        }
    }
}

/// Index of a source by display name, or by registered name.
pub fn resolve_source(name: &str, vocab: &Vocabulary, registered: &[String]) -> Result<usize> {
    vocab
        .source_names()
        .iter()
        .position(|n| n == name)
        .or_else(|| registered.iter().position(|n| n == name))
        .ok_or_else(|| {
            Error::Data(format!(
                "source {name:?} is not registered; registered sources: {}",
                vocab.source_names().join(", ")
            ))
        })
}

/// Attaches source prompts to encoded examples. Order and count are kept.
pub fn assign_sp(
    bodies: &[Vec<u32>],
    assignment: &SpAssignment,
    prompter: &Prompter,
    vocab: &Vocabulary,
    registered: &[String],
    predictor: Option<&dyn SourcePredictor>,
) -> Result<Vec<PromptedSample>> {
    let sources: Vec<usize> = match assignment {
        SpAssignment::None => return Ok(bodies.iter().cloned().map(PromptedSample::bare).collect()),
        SpAssignment::Manual(name) => vec![resolve_source(name, vocab, registered)?; bodies.len()],
        SpAssignment::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            bodies.iter().map(|_| rng.random_range(0..vocab.num_sources())).collect()
        }
        SpAssignment::Auto => {
            let p = predictor.ok_or_else(|| Error::Contract("auto assignment needs a source predictor".into()))?;
            let s = p.predict(bodies)?;
            if s.len() != bodies.len() || s.iter().any(|&k| k >= vocab.num_sources()) {
                return Err(Error::Contract("source predictor returned an invalid assignment".into()));
            }
            s
        }
    };
    Ok(bodies.iter().zip(sources).map(|(b, k)| prompter.prompt(b, k)).collect())
}

// ---------------------------------------------------------------------------
// Task data

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    TextToText,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "text_to_text" | "text-to-text" => Ok(TaskKind::TextToText),
            _ => Err(Error::Data(format!("unknown task kind {s:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::TextToText => "text_to_text",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    /// Class label, or target text.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub source_hint: Option<String>,
    pub test_fraction: f64,
    pub examples: Vec<Example>,
    /// Class inventory in first-appearance order (classification only).
    pub labels: Vec<String>,
}

/// `true` for the indices the interleave rule sends to the held-out side:
/// `⌊(i+1)f⌋ > ⌊if⌋`.
pub fn interleave_mask(n: usize, fraction: f64) -> Vec<bool> {
    (0..n)
        .map(|i| ((i + 1) as f64 * fraction).floor() > (i as f64 * fraction).floor())
        .collect()
}

impl TaskDataset {
    /// Parses a task file: a `# kind=… source=… test_fraction=…` header,
    /// then `label<TAB>text` or `input<TAB>target` lines.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty task file".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| perr(1, "first line must be a `# kind=…` header".into()))?;
        let mut kind = None;
        let mut source_hint = None;
        let mut test_fraction = 0.2;
        for kv in header.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| perr(1, format!("bad header field {kv:?}")))?;
            match k {
                "kind" => kind = Some(v.parse::<TaskKind>().map_err(|e| perr(1, e.to_string()))?),
                "source" => source_hint = Some(v.to_string()),
                "test_fraction" => {
                    test_fraction = v
                        .parse::<f64>()
                        .ok()
                        .filter(|f| (0.0..1.0).contains(f))
                        .ok_or_else(|| perr(1, format!("test_fraction {v:?} outside [0, 1)")))?
                }
                _ => return Err(perr(1, format!("unknown header field {k:?}"))),
            }
        }
        let kind = kind.ok_or_else(|| perr(1, "header lacks kind=".into()))?;
        let mut examples = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for (i, line) in lines {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let mut f = line.split('\t');
            let (Some(a), Some(b), None) = (f.next(), f.next(), f.next()) else {
                return Err(perr(i + 1, "expected two tab-separated fields".into()));
            };
            let ex = match kind {
                TaskKind::Classification => {
                    if a.trim().is_empty() {
                        return Err(perr(i + 1, "empty label".into()));
                    }
                    if !labels.iter().any(|l| l == a) {
                        labels.push(a.to_string());
                    }
                    Example {
                        text: b.to_string(),
                        target: a.to_string(),
                    }
                }
                TaskKind::TextToText => Example {
                    text: a.to_string(),
                    target: b.to_string(),
                },
            };
            examples.push(ex);
        }
        let d = TaskDataset {
            kind,
            source_hint,
            test_fraction,
            examples,
            labels,
        };
        let (train, test) = d.split_indices();
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!(
                "{origin}: train and test splits must both be non-empty ({} examples, test_fraction {})",
                d.examples.len(),
                d.test_fraction
            )));
        }
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Classification task whose label is a function of the source:
    /// every document of source `k` gets `labels[k]`. Documents are
    /// interleaved round-robin across sources so both splits see all of
    /// them.
    pub fn from_sources<S: AsRef<str>>(registry: &CorpusRegistry, labels: &[S], test_fraction: f64) -> Result<Self> {
        if labels.len() != registry.num_sources() {
            return Err(Error::Data(format!(
                "{} labels for {} sources",
                labels.len(),
                registry.num_sources()
            )));
        }
        let mut inventory: Vec<String> = Vec::new();
        for l in labels {
            if !inventory.iter().any(|x| x == l.as_ref()) {
                inventory.push(l.as_ref().to_string());
            }
        }
        let longest = registry.document_counts().into_iter().max().unwrap_or(0);
        let mut examples = Vec::new();
        let k_all = registry.num_sources();
        // Rotating the order each round keeps periodic splits from landing
        // on a single source.
        for j in 0..longest {
            for r in 0..k_all {
                let k = (j + r) % k_all;
                if let Some(d) = registry.sources()[k].documents.get(j) {
                    examples.push(Example {
                        text: d.clone(),
                        target: labels[k].as_ref().to_string(),
                    });
                }
            }
        }
        Ok(TaskDataset {
            kind: TaskKind::Classification,
            source_hint: None,
            test_fraction,
            examples,
            labels: inventory,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# kind={} test_fraction={}", self.kind, self.test_fraction);
        if let Some(h) = &self.source_hint {
            s.push_str(&format!(" source={h}"));
        }
        s.push('\n');
        for e in &self.examples {
            match self.kind {
                TaskKind::Classification => s.push_str(&format!("{}\t{}\n", e.target, e.text)),
                TaskKind::TextToText => s.push_str(&format!("{}\t{}\n", e.text, e.target)),
            }
        }
        s
    }

    /// `(train, test)` example indices by the interleave rule.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let mask = interleave_mask(self.examples.len(), self.test_fraction);
        (0..self.examples.len()).partition(|&i| !mask[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Text(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtExample {
    pub sample: PromptedSample,
    pub target: Target,
}

/// Encoded, prompted and split task.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneData {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub train: Vec<FtExample>,
    pub validation: Vec<FtExample>,
    pub test: Vec<FtExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of the training part held out for model selection.
    pub validation_fraction: f64,
    pub seed: u64,
    pub max_len: Option<usize>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
            seed: 0,
            max_len: None,
        }
    }
}

/// Encodes, splits and prompts a task for `model`.
#[allow(clippy::too_many_arguments)]
pub fn prepare_task(
    task: &TaskDataset,
    model: &ModelState,
    vocab: &Vocabulary,
    prompter: &Prompter,
    assignment: &SpAssignment,
    registered: &[String],
    predictor: Option<&dyn SourcePredictor>,
    config: &FinetuneConfig,
) -> Result<FinetuneData> {
    let arch = model.config.architecture;
    if arch == Architecture::EncoderOnly && task.kind == TaskKind::TextToText {
        return Err(Error::Contract("text-to-text tasks need a model with a decoder".into()));
    }
    let max_len = config.max_len.unwrap_or(model.config.max_seq_len).min(model.config.max_seq_len);
    let targets: Vec<Target> = task
        .examples
        .iter()
        .map(|e| match task.kind {
            TaskKind::Classification => Ok(Target::Class(
                task.labels.iter().position(|l| *l == e.target).expect("label from inventory"),
            )),
            TaskKind::TextToText => Ok(Target::Text(vocab.encode(&e.target))),
        })
        .collect::<Result<_>>()?;
    let bodies: Vec<Vec<u32>> = task
        .examples
        .iter()
        .zip(&targets)
        .map(|(e, t)| {
            let extra = match (arch, t) {
                (Architecture::DecoderOnly, Target::Text(y)) => 2 + y.len() + 1,
                (Architecture::DecoderOnly, Target::Class(_)) => 2,
                _ => 0,
            };
            let room = max_len.saturating_sub(prompter.sp_len() + 1 + extra).max(1);
            let mut ids = vocab.encode(&e.text);
            ids.truncate(room);
            ids
        })
        .collect();
    let prompted = assign_sp(&bodies, assignment, prompter, vocab, registered, predictor)?;
    let (train_idx, test_idx) = task.split_indices();
    let val_mask = interleave_mask(train_idx.len(), config.validation_fraction);
    let make = |i: usize| FtExample {
        sample: prompted[i].clone(),
        target: targets[i].clone(),
    };
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (j, &i) in train_idx.iter().enumerate() {
        if val_mask[j] {
            validation.push(make(i));
        } else {
            train.push(make(i));
        }
    }
    if train.is_empty() {
        return Err(Error::Data("no training examples left after the validation split".into()));
    }
    Ok(FinetuneData {
        kind: task.kind,
        labels: task.labels.clone(),
        train,
        validation,
        test: test_idx.into_iter().map(make).collect(),
    })
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetric {
    pub name: &'static str,
    pub value: f64,
}

/// Accuracy for at most two classes, macro-F1 otherwise.
pub fn classification_metric(gold: &[usize], pred: &[usize], classes: usize) -> TaskMetric {
    if classes <= 2 {
        let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
        return TaskMetric {
            name: "accuracy",
            value: hits as f64 / gold.len().max(1) as f64,
        };
    }
    let mut f1s = Vec::new();
    for c in 0..classes {
        let tp = gold.iter().zip(pred).filter(|&(&g, &p)| g == c && p == c).count() as f64;
        let fp = gold.iter().zip(pred).filter(|&(&g, &p)| g != c && p == c).count() as f64;
        let fneg = gold.iter().zip(pred).filter(|&(&g, &p)| g == c && p != c).count() as f64;
        if tp + fp + fneg > 0.0 {
            f1s.push(2.0 * tp / (2.0 * tp + fp + fneg));
        }
    }
    TaskMetric {
        name: "macro_f1",
        value: if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 },
    }
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> f64 {
    gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64 / gold.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub metric_name: &'static str,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub test: Option<TaskMetric>,
}

impl FinetuneReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_metric,val_metric\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.train_metric, e.val_metric));
        }
        if let Some(t) = &self.test {
            s.push_str(&format!("\n# summary\nmetric,{}\nbest_epoch,{}\ntest,{}\n", t.name, self.best_epoch.unwrap_or(0), t.value));
        }
        s
    }
}

struct Tuner {
    kind: TaskKind,
    label_ids: Vec<u32>,
    classes: usize,
}

struct Built {
    src: Vec<u32>,
    dec: Option<Vec<u32>>,
    labels: Vec<Option<u32>>,
}

impl Tuner {
    fn new(arch: Architecture, vocab: &Vocabulary, kind: TaskKind, labels: &[String]) -> Result<Self> {
        let mut label_ids = Vec::new();
        if kind == TaskKind::Classification && arch != Architecture::EncoderOnly {
            for l in labels {
                let id = vocab
                    .id(l)
                    .ok_or_else(|| Error::Data(format!("label {l:?} is not a vocabulary token; the LM head cannot score it")))?;
                label_ids.push(id);
            }
        }
        Ok(Tuner {
            kind,
            label_ids,
            classes: labels.len(),
        })
    }

    /// Input layout and training labels for one example.
    fn build(&self, arch: Architecture, ex: &FtExample) -> Built {
        let x = &ex.sample.tokens;
        match (arch, &ex.target) {
            (Architecture::EncoderOnly, _) => Built {
                src: x.clone(),
                dec: None,
                labels: vec![],
            },
            (Architecture::EncoderDecoder, Target::Class(c)) => Built {
                src: x.clone(),
                dec: Some(vec![BOS]),
                labels: vec![Some(self.label_ids[*c])],
            },
            (Architecture::EncoderDecoder, Target::Text(y)) => {
                let mut dec = vec![BOS];
                dec.extend_from_slice(y);
                let mut labels: Vec<Option<u32>> = y.iter().map(|&t| Some(t)).collect();
                labels.push(Some(EOS));
                Built {
                    src: x.clone(),
                    dec: Some(dec),
                    labels,
                }
            }
            (Architecture::DecoderOnly, target) => {
                let mut src = vec![BOS];
                src.extend_from_slice(x);
                src.push(EOS);
                let mut labels = vec![None; src.len()];
                match target {
                    Target::Class(c) => *labels.last_mut().unwrap() = Some(self.label_ids[*c]),
                    Target::Text(y) => {
                        for &t in y {
                            *labels.last_mut().unwrap() = Some(t);
                            src.push(t);
                            labels.push(None);
                        }
                        *labels.last_mut().unwrap() = Some(EOS);
                    }
                }
                Built {
                    src,
                    dec: None,
                    labels,
                }
            }
        }
    }

    fn loss(&self, model: &ModelState, tape: &mut Tape, p: &[crate::autodiff::Var], batch: &[&FtExample]) -> Result<crate::autodiff::Var> {
        let arch = model.config.architecture;
        let built: Vec<Built> = batch.iter().map(|e| self.build(arch, e)).collect();
        let src = TokenBatch::from_rows(&built.iter().map(|b| b.src.clone()).collect::<Vec<_>>());
        if arch == Architecture::EncoderOnly {
            let h = model.encoder_hidden(tape, p, &src, None)?;
            let z = model.classify(tape, p, h, src.batch, src.seq)?;
            let targets: Vec<Option<u32>> = batch
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => Some(c as u32),
                    Target::Text(_) => None,
                })
                .collect();
            return tape.softmax_cross_entropy(z, &targets);
        }
        let (h, seq) = if arch == Architecture::EncoderDecoder {
            let dec = TokenBatch::from_rows(&built.iter().map(|b| b.dec.clone().unwrap()).collect::<Vec<_>>());
            (model.seq2seq_hidden(tape, p, &src, &dec, None)?, dec.seq)
        } else {
            (model.causal_hidden(tape, p, &src, None)?, src.seq)
        };
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, bt) in built.iter().enumerate() {
            for (i, l) in bt.labels.iter().enumerate() {
                if l.is_some() {
                    rows.push(b * seq + i);
                    targets.push(*l);
                }
            }
        }
        let z = model.project(tape, p, h, Some(&rows))?;
        tape.softmax_cross_entropy(z, &targets)
    }

    fn predict_classes(&self, model: &ModelState, data: &[FtExample], batch_size: usize) -> Result<Vec<usize>> {
        let arch = model.config.architecture;
        if arch == Architecture::EncoderOnly {
            let mut out = Vec::with_capacity(data.len());
            for chunk in data.chunks(batch_size.max(1)) {
                let mut tape = Tape::new();
                let p = model.bind(&mut tape, false);
                let src = TokenBatch::from_rows(&chunk.iter().map(|e| e.sample.tokens.clone()).collect::<Vec<_>>());
                let h = model.encoder_hidden(&mut tape, &p, &src, None)?;
                let z = model.classify(&mut tape, &p, h, src.batch, src.seq)?;
                let z = tape.value(z);
                for r in 0..chunk.len() {
                    out.push(argmax(z.row(r)));
                }
            }
            return Ok(out);
        }
        let rows: Vec<ScoreRow> = data
            .iter()
            .map(|e| {
                let b = self.build(arch, e);
                ScoreRow {
                    src: b.src,
                    dec: b.dec,
                    labels: b.labels,
                }
            })
            .collect();
        let scores = score_rows(model, &rows, &self.label_ids, batch_size)?;
        Ok(scores.iter().map(|s| argmax(&s[0].extra)).collect())
    }

    fn greedy(&self, model: &ModelState, ex: &FtExample, limit: usize) -> Result<Vec<u32>> {
        let arch = model.config.architecture;
        let mut out: Vec<u32> = Vec::new();
        while out.len() < limit {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, false);
            let (h, last) = if arch == Architecture::EncoderDecoder {
                let src = TokenBatch::from_rows(std::slice::from_ref(&ex.sample.tokens));
                let mut dec = vec![BOS];
                dec.extend_from_slice(&out);
                let n = dec.len();
                (model.seq2seq_hidden(&mut tape, &p, &src, &TokenBatch::from_rows(&[dec]), None)?, n - 1)
            } else {
                let mut src = vec![BOS];
                src.extend_from_slice(&ex.sample.tokens);
                src.push(EOS);
                src.extend_from_slice(&out);
                if src.len() > model.config.max_seq_len {
                    break;
                }
                let n = src.len();
                (model.causal_hidden(&mut tape, &p, &TokenBatch::from_rows(&[src]), None)?, n - 1)
            };
            let z = model.project(&mut tape, &p, h, Some(&[last]))?;
            let next = argmax(tape.value(z).data()) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    fn metric(&self, model: &ModelState, data: &[FtExample], batch_size: usize, limit: usize) -> Result<TaskMetric> {
        match self.kind {
            TaskKind::Classification => {
                let gold: Vec<usize> = data
                    .iter()
                    .map(|e| match e.target {
                        Target::Class(c) => c,
                        Target::Text(_) => unreachable!(),
                    })
                    .collect();
                let pred = self.predict_classes(model, data, batch_size)?;
                Ok(classification_metric(&gold, &pred, self.classes))
            }
            TaskKind::TextToText => {
                let mut hits = 0;
                for e in data {
                    let Target::Text(y) = &e.target else { unreachable!() };
                    if self.greedy(model, e, limit)? == *y {
                        hits += 1;
                    }
                }
                Ok(TaskMetric {
                    name: "exact_match",
                    value: hits as f64 / data.len().max(1) as f64,
                })
            }
        }
    }
}

/// Greedy decoding budget: twice the longest training target, plus slack.
fn decode_limit(train: &[FtExample]) -> usize {
    train
        .iter()
        .filter_map(|e| match &e.target {
            Target::Text(y) => Some(y.len()),
            _ => None,
        })
        .max()
        .unwrap_or(0)
        * 2
        + 2
}

/// Scores a fine-tuned model on `examples` with the task's metric.
pub fn task_metric(
    model: &ModelState,
    vocab: &Vocabulary,
    data: &FinetuneData,
    examples: &[FtExample],
    batch_size: usize,
) -> Result<TaskMetric> {
    let arch = model.config.architecture;
    if arch == Architecture::EncoderOnly
        && data.kind == TaskKind::Classification
        && model.config.classifier_classes != data.labels.len()
    {
        return Err(Error::Data(format!(
            "model has a {}-class head but the task has {} classes",
            model.config.classifier_classes,
            data.labels.len()
        )));
    }
    let tuner = Tuner::new(arch, vocab, data.kind, &data.labels)?;
    tuner.metric(model, examples, batch_size, decode_limit(&data.train))
}

/// Full-parameter fine-tuning; returns the model from the epoch with the
/// best validation metric, and its test score.
pub fn finetune(
    model: &ModelState,
    vocab: &Vocabulary,
    data: &FinetuneData,
    config: &FinetuneConfig,
) -> Result<(ModelState, FinetuneReport)> {
    let arch = model.config.architecture;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Data("vocabulary does not match the model".into()));
    }
    let tuner = Tuner::new(arch, vocab, data.kind, &data.labels)?;
    let classes = data.labels.len();
    for e in data.train.iter().chain(&data.validation).chain(&data.test) {
        if let Target::Class(c) = e.target {
            if c >= classes {
                return Err(Error::Data(format!("label index {c} outside the inventory of {classes}")));
            }
        }
    }
    let mut model = if arch == Architecture::EncoderOnly && data.kind == TaskKind::Classification {
        if model.config.classifier_classes == classes {
            model.clone()
        } else {
            model.with_classifier(classes, config.seed)?
        }
    } else {
        model.clone()
    };
    let limit = decode_limit(&data.train);
    let metric_name = match (data.kind, classes) {
        (TaskKind::TextToText, _) => "exact_match",
        (_, c) if c <= 2 => "accuracy",
        _ => "macro_f1",
    };
    let mut report = FinetuneReport {
        metric_name,
        epochs: Vec::new(),
        best_epoch: None,
        test: None,
    };
    if config.epochs == 0 {
        return Ok((model, report));
    }
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let val = if data.validation.is_empty() { &data.train } else { &data.validation };
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&FtExample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let loss = tuner.loss(&model, &mut tape, &p, &batch)?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = p.iter().map(|&v| tape.grad_tensor(v)).collect();
            drop(tape);
            adam.step(&mut model.params, &grads)?;
            model.params.iter_mut().for_each(|t| round_f32(t.data_mut()));
        }
        let train_metric = tuner.metric(&model, &data.train, config.batch_size, limit)?.value;
        let val_metric = tuner.metric(&model, val, config.batch_size, limit)?.value;
        report.epochs.push(EpochMetrics {
            epoch,
            train_loss: total / data.train.len() as f64,
            train_metric,
            val_metric,
        });
        if best.as_ref().is_none_or(|(b, _)| val_metric > *b) {
            best = Some((val_metric, model.params.clone()));
            report.best_epoch = Some(epoch);
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    if !data.test.is_empty() {
        report.test = Some(tuner.metric(&model, &data.test, config.batch_size, limit)?);
    }
    Ok((model, report))
}
