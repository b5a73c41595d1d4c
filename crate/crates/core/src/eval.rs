//! Per-source language-model loss, source-prediction accuracy, task
//! metrics, and paired comparison of seeded runs.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::corpus::CorpusRegistry;
use crate::error::{Error, Result};
use crate::finetune::{predict_sources, TaskMetric};
use crate::model::{Architecture, ModelState, TokenBatch};
use crate::pretrain::{make_seq2seq_batch, LabelKind, MaskedSample, Placement, Prompter, PromptedSample, SpTokenMode};
use crate::tokenizer::{Vocabulary, BOS, MASK};

/// One row to score: the input, an optional decoder input, and labels on
/// the decoder side when present, otherwise on the input.
#[derive(Debug, Clone)]
pub(crate) struct ScoreRow {
    pub src: Vec<u32>,
    pub dec: Option<Vec<u32>>,
    pub labels: Vec<Option<u32>>,
}

#[derive(Debug, Clone)]
pub(crate) struct PositionScore {
    pub logp: f64,
    /// Log-probabilities of the requested extra ids.
    pub extra: Vec<f64>,
}

fn score_chunk(model: &ModelState, rows: &[ScoreRow], extra: &[u32]) -> Result<Vec<Vec<PositionScore>>> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let src = TokenBatch::from_rows(&rows.iter().map(|r| r.src.clone()).collect::<Vec<_>>());
    let (hidden, seq) = match model.config.architecture {
        Architecture::EncoderOnly => (model.encoder_hidden(&mut tape, &p, &src, None)?, src.seq),
        Architecture::DecoderOnly => (model.causal_hidden(&mut tape, &p, &src, None)?, src.seq),
        Architecture::EncoderDecoder => {
            let dec_rows: Vec<Vec<u32>> = rows
                .iter()
                .map(|r| r.dec.clone().ok_or_else(|| Error::Contract("decoder input missing".into())))
                .collect::<Result<_>>()?;
            let dseq = dec_rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
            let dec = TokenBatch::padded(&dec_rows, dseq);
            (model.seq2seq_hidden(&mut tape, &p, &src, &dec, None)?, dseq)
        }
    };
    let mut positions = Vec::new();
    for (b, r) in rows.iter().enumerate() {
        for (i, l) in r.labels.iter().enumerate() {
            if let Some(l) = l {
                positions.push((b, b * seq + i, *l));
            }
        }
    }
    let mut out: Vec<Vec<PositionScore>> = vec![Vec::new(); rows.len()];
    if positions.is_empty() {
        return Ok(out);
    }
    let idx: Vec<usize> = positions.iter().map(|p| p.1).collect();
    let logits = model.project(&mut tape, &p, hidden, Some(&idx))?;
    let z = tape.value(logits);
    let v = z.last_dim();
    for (j, &(b, _, label)) in positions.iter().enumerate() {
        let row = &z.data()[j * v..(j + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        out[b].push(PositionScore {
            logp: row[label as usize] - lse,
            extra: extra.iter().map(|&e| row[e as usize] - lse).collect(),
        });
    }
    Ok(out)
}

/// Scores every labelled position of `rows`, in batches of `batch_size`
/// processed in parallel; results keep row order.
pub(crate) fn score_rows(
    model: &ModelState,
    rows: &[ScoreRow],
    extra: &[u32],
    batch_size: usize,
) -> Result<Vec<Vec<PositionScore>>> {
    let chunks: Vec<Vec<Vec<PositionScore>>> = rows
        .par_chunks(batch_size.max(1))
        .map(|c| score_chunk(model, c, extra))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpMode {
    WithSp,
    WithoutSp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Encoder models score body tokens in this many masked passes, pass
    /// `r` masking body positions `i ≡ r (mod rotation)`.
    pub rotation: usize,
    pub batch_size: usize,
    /// Defaults to the model's `max_seq_len`.
    pub max_len: Option<usize>,
    /// Prompt layout when the model records none.
    pub placement: Placement,
    pub token_mode: SpTokenMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            rotation: 7,
            batch_size: 32,
            max_len: None,
            placement: Placement::Start,
            token_mode: SpTokenMode::Reserved,
        }
    }
}

impl EvalOptions {
    pub(crate) fn prompter(&self, model: &ModelState, vocab: &Vocabulary) -> Result<Prompter> {
        match &model.source_training {
            Some(st) => Prompter::new(vocab, st.placement, st.token_mode),
            None => Prompter::new(vocab, self.placement, self.token_mode),
        }
    }

    /// Body length that leaves room for a prompt, so both modes score the
    /// same tokens.
    pub(crate) fn body_len(&self, model: &ModelState, prompter: &Prompter) -> Result<usize> {
        let max_len = self.max_len.unwrap_or(model.config.max_seq_len).min(model.config.max_seq_len);
        let causal = usize::from(model.config.architecture == Architecture::DecoderOnly);
        max_len
            .checked_sub(prompter.sp_len() + 1 + causal)
            .filter(|&b| b > 0)
            .ok_or_else(|| Error::Data(format!("max_len {max_len} leaves no room for a body")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceLoss {
    pub name: String,
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean cross-entropy (nats/token) over scored body tokens.
    pub overall: f64,
    pub per_source: Vec<SourceLoss>,
    pub msp_accuracy: Option<f64>,
    pub task_metric: Option<TaskMetric>,
    pub documents: usize,
    pub tokens: usize,
}

impl EvalReport {
    /// Metrics-log style CSV followed by a summary block.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("source,loss,tokens\n");
        for p in &self.per_source {
            let _ = writeln!(s, "{},{},{}", p.name, p.loss, p.tokens);
        }
        let _ = writeln!(s, "\n# summary");
        let _ = writeln!(s, "overall_loss,{}", self.overall);
        let _ = writeln!(s, "documents,{}", self.documents);
        let _ = writeln!(s, "tokens,{}", self.tokens);
        if let Some(a) = self.msp_accuracy {
            let _ = writeln!(s, "msp_accuracy,{a}");
        }
        if let Some(t) = &self.task_metric {
            let _ = writeln!(s, "{},{}", t.name, t.value);
        }
        s
    }

    /// Aligned columns for a terminal.
    pub fn to_table(&self) -> String {
        let w = self.per_source.iter().map(|p| p.name.len()).max().unwrap_or(6).max(7);
        let mut s = format!("{:<w$}  {:>10}  {:>8}\n", "source", "loss", "tokens");
        for p in &self.per_source {
            let _ = writeln!(s, "{:<w$}  {:>10.6}  {:>8}", p.name, p.loss, p.tokens);
        }
        let _ = writeln!(s, "{:<w$}  {:>10.6}  {:>8}", "overall", self.overall, self.tokens);
        if let Some(a) = self.msp_accuracy {
            let _ = writeln!(s, "{:<w$}  {:>10.6}", "msp_acc", a);
        }
        if let Some(t) = &self.task_metric {
            let _ = writeln!(s, "{:<w$}  {:>10.6}", t.name, t.value);
        }
        s
    }
}

/// Builds the rows that score each body token of each document once.
fn lm_rows(
    model: &ModelState,
    prompter: &Prompter,
    docs: &[(usize, Vec<u32>)],
    mode: SpMode,
    rotation: usize,
) -> Vec<(usize, ScoreRow)> {
    let mut out = Vec::new();
    for (k, body) in docs {
        let sample = match mode {
            SpMode::WithSp => prompter.prompt(body, *k),
            SpMode::WithoutSp => PromptedSample::bare(body.clone()),
        };
        match model.config.architecture {
            Architecture::DecoderOnly => {
                let s = sample.with_prefix(BOS);
                let mut labels = vec![None; s.tokens.len()];
                // The first body token has no body context in either mode.
                for t in s.body.start + 1..s.body.end {
                    labels[t - 1] = Some(s.tokens[t]);
                }
                out.push((
                    *k,
                    ScoreRow {
                        src: s.tokens,
                        dec: None,
                        labels,
                    },
                ));
            }
            arch => {
                for r in 0..rotation.min(body.len()) {
                    let mut m = MaskedSample {
                        input: sample.tokens.clone(),
                        labels: vec![None; sample.tokens.len()],
                        kinds: vec![LabelKind::Body; sample.tokens.len()],
                    };
                    for (j, t) in sample.body.clone().enumerate() {
                        if j % rotation == r {
                            m.input[t] = MASK;
                            m.labels[t] = Some(sample.tokens[t]);
                        }
                    }
                    let row = if arch == Architecture::EncoderOnly {
                        ScoreRow {
                            src: m.input,
                            dec: None,
                            labels: m.labels,
                        }
                    } else {
                        let b = make_seq2seq_batch(std::slice::from_ref(&m), &[*k], model.config.max_seq_len);
                        let dec = b.decoder.unwrap();
                        let n = dec.valid.iter().filter(|&&v| v).count();
                        ScoreRow {
                            src: m.input,
                            dec: Some(dec.ids[..n].to_vec()),
                            labels: b.labels[..n].to_vec(),
                        }
                    };
                    out.push((*k, row));
                }
            }
        }
    }
    out
}

pub(crate) fn encode_split(
    vocab: &Vocabulary,
    split: &CorpusRegistry,
    body_len: usize,
) -> Result<Vec<(usize, Vec<u32>)>> {
    if vocab.num_sources() != split.num_sources() {
        return Err(Error::Data(format!(
            "vocabulary has {} sources but the split has {}",
            vocab.num_sources(),
            split.num_sources()
        )));
    }
    let docs: Vec<(usize, Vec<u32>)> = split
        .documents()
        .map(|(k, d)| {
            let mut ids = vocab.encode(d);
            ids.truncate(body_len);
            (k, ids)
        })
        .filter(|(_, d)| !d.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    Ok(docs)
}

/// Teacher-forced cross-entropy on body tokens only, with or without the
/// true source prompt.
pub fn eval_lm(
    model: &ModelState,
    vocab: &Vocabulary,
    split: &CorpusRegistry,
    mode: SpMode,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Data("vocabulary does not match the model".into()));
    }
    let prompter = opts.prompter(model, vocab)?;
    let docs = encode_split(vocab, split, opts.body_len(model, &prompter)?)?;
    let rows = lm_rows(model, &prompter, &docs, mode, opts.rotation.max(1));
    let (sources, rows): (Vec<usize>, Vec<ScoreRow>) = rows.into_iter().unzip();
    let scores = score_rows(model, &rows, &[], opts.batch_size)?;
    let m = vocab.num_sources();
    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    for (k, s) in sources.iter().zip(&scores) {
        for p in s {
            sum[*k] -= p.logp;
            count[*k] += 1;
        }
    }
    let tokens: usize = count.iter().sum();
    if tokens == 0 {
        return Err(Error::Data("evaluation split has no scorable tokens".into()));
    }
    Ok(EvalReport {
        overall: sum.iter().sum::<f64>() / tokens as f64,
        per_source: (0..m)
            .map(|k| SourceLoss {
                name: split.source(k).name.clone(),
                loss: if count[k] > 0 { sum[k] / count[k] as f64 } else { f64::NAN },
                tokens: count[k],
            })
            .collect(),
        msp_accuracy: None,
        task_metric: None,
        documents: docs.len(),
        tokens,
    })
}

/// Fraction of documents whose predicted source is the true one.
pub fn eval_msp(model: &ModelState, vocab: &Vocabulary, split: &CorpusRegistry, opts: &EvalOptions) -> Result<f64> {
    let prompter = opts.prompter(model, vocab)?;
    let docs = encode_split(vocab, split, opts.body_len(model, &prompter)?)?;
    let bodies: Vec<Vec<u32>> = docs.iter().map(|(_, d)| d.clone()).collect();
    let pred = predict_sources(model, vocab, &bodies, opts.batch_size)?;
    let hits = pred.iter().zip(&docs).filter(|(p, (k, _))| *p == k).count();
    Ok(hits as f64 / docs.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Mean of the paired differences `a − b`.
    pub mean_difference: f64,
    /// All differences share one strict sign.
    pub sign_consistent: bool,
    pub min_difference: f64,
    pub max_difference: f64,
    pub differences: Vec<f64>,
}

/// Paired per-seed comparison of two metric lists.
pub fn compare_runs(a: &[f64], b: &[f64]) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("run lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Data("compare_runs needs at least two seeds".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Comparison {
        mean_difference: d.iter().sum::<f64>() / d.len() as f64,
        sign_consistent: min > 0.0 || max < 0.0,
        min_difference: min,
        max_difference: max,
        differences: d,
    })
}
