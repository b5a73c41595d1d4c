//! Source-prompt injection, MLM and masked-source-prediction masking,
//! batch collation, and the pre-training loop.

mod batch;
mod prompt;

pub use batch::{make_causal_batch, make_mlm_batch, make_seq2seq_batch, row_losses, RowLoss, TrainBatch};
pub use prompt::{
    apply_mlm_masking, apply_msp_masking, causal_labels, truncate, LabelKind, MaskedSample, PromptedSample,
    Prompter, ReplacementRange, SpInfo,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::corpus::CorpusRegistry;
use crate::error::{Error, Result};
use crate::model::{round_f32, Architecture, ModelState};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// `[SRC][SEP]body`
    Start,
    /// `body[SEP][SRC]`
    End,
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(Placement::Start),
            "end" => Ok(Placement::End),
            _ => Err(Error::Data(format!("unknown placement {s:?} (expected start or end)"))),
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Start => "start",
            Placement::End => "end",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpTokenMode {
    /// One reserved vocabulary id per source.
    Reserved,
    /// The display name spelled with ordinary tokens.
    Textual,
}

impl FromStr for SpTokenMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reserved" => Ok(SpTokenMode::Reserved),
            "textual" => Ok(SpTokenMode::Textual),
            _ => Err(Error::Data(format!("unknown sp_token_mode {s:?} (expected reserved or textual)"))),
        }
    }
}

impl fmt::Display for SpTokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpTokenMode::Reserved => "reserved",
            SpTokenMode::Textual => "textual",
        })
    }
}

/// How a model saw source prompts during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTraining {
    pub include_prob: f64,
    pub mask_prob: f64,
    pub placement: Placement,
    pub token_mode: SpTokenMode,
}

impl SourceTraining {
    pub fn knows_sources(&self) -> bool {
        self.include_prob > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub mlm_prob: f64,
    /// Probability `P` of masking the source prompt.
    pub sp_mask_prob: f64,
    /// Probability `ρ` that a sample carries a source prompt.
    pub sp_include_prob: f64,
    pub placement: Placement,
    pub sp_token_mode: SpTokenMode,
    /// `false` bypasses every source-prompt code path.
    pub source_prompts: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Sample length cap; defaults to the model's `max_seq_len`.
    pub max_len: Option<usize>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mlm_prob: 0.15,
            sp_mask_prob: 0.15,
            sp_include_prob: 0.5,
            placement: Placement::Start,
            sp_token_mode: SpTokenMode::Reserved,
            source_prompts: true,
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_steps: 0,
            grad_clip: 1.0,
            max_len: None,
            seed: 0,
            log_every: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mlm_prob", self.mlm_prob),
            ("sp_mask_prob", self.sp_mask_prob),
            ("sp_include_prob", self.sp_include_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Data(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Data("batch_size and log_every must be positive".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Data(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    fn prompts_active(&self) -> bool {
        self.source_prompts && self.sp_include_prob > 0.0
    }

    /// Recorded on the model after training.
    pub fn source_training(&self) -> Option<SourceTraining> {
        self.source_prompts.then(|| SourceTraining {
            include_prob: self.sp_include_prob,
            mask_prob: self.sp_mask_prob,
            placement: self.placement,
            token_mode: self.sp_token_mode,
        })
    }
}

// RNG stream ids; each purpose draws from its own ChaCha stream so that
// turning one mechanism off leaves the others' draws untouched.
const STREAM_DATA: u64 = 1;
const STREAM_SP: u64 = 2;
const STREAM_MLM: u64 = 3;
const STREAM_MSP: u64 = 4;
const STREAM_DROPOUT: u64 = 5;

pub(crate) fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | index);
    rng
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub mlm_loss: Option<f64>,
    pub msp_loss: Option<f64>,
    pub msp_acc: Option<f64>,
    pub per_source: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub num_sources: usize,
    pub rows: Vec<MetricRow>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsLog {
    pub fn header(num_sources: usize) -> String {
        let mut h = String::from("step,loss,mlm_loss,msp_loss,msp_acc");
        for k in 0..num_sources {
            h.push_str(&format!(",loss_src{k}"));
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::header(self.num_sources);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}",
                r.step,
                r.loss,
                opt(r.mlm_loss),
                opt(r.msp_loss),
                opt(r.msp_acc)
            ));
            for v in &r.per_source {
                s.push(',');
                s.push_str(&opt(*v));
            }
            s.push('\n');
        }
        s
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }
}

/// Runs the pre-training loop step by step.
pub struct Pretrainer<'a> {
    model: &'a mut ModelState,
    vocab: &'a Vocabulary,
    config: PretrainConfig,
    prompter: Prompter,
    replace: ReplacementRange,
    docs: Vec<(usize, Vec<u32>)>,
    max_len: usize,
    body_len: usize,
    pub adam: AdamState,
    step: usize,
    log: MetricsLog,
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        model: &'a mut ModelState,
        vocab: &'a Vocabulary,
        registry: &CorpusRegistry,
        config: PretrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Data(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        if vocab.num_sources() != registry.num_sources() {
            return Err(Error::Data(format!(
                "vocabulary has {} sources but the corpus has {}",
                vocab.num_sources(),
                registry.num_sources()
            )));
        }
        let prompter = Prompter::new(vocab, config.placement, config.sp_token_mode)?;
        let max_len = config.max_len.unwrap_or(model.config.max_seq_len);
        if max_len > model.config.max_seq_len {
            return Err(Error::Data(format!(
                "max_len {max_len} exceeds the model's max_seq_len {}",
                model.config.max_seq_len
            )));
        }
        let causal = model.config.architecture == Architecture::DecoderOnly;
        let reserve = usize::from(causal) + if config.prompts_active() { prompter.sp_len() + 1 } else { 0 };
        let body_len = max_len.checked_sub(reserve).filter(|&b| b > 0).ok_or_else(|| {
            Error::Data(format!("max_len {max_len} leaves no room for a body"))
        })?;
        let docs: Vec<(usize, Vec<u32>)> = registry
            .documents()
            .map(|(k, d)| (k, vocab.encode(d)))
            .filter(|(_, d)| !d.is_empty())
            .collect();
        if docs.is_empty() {
            return Err(Error::Data("corpus has no non-empty documents".into()));
        }
        let adam = AdamState::new(
            AdamConfig {
                lr: config.learning_rate,
                ..AdamConfig::default()
            },
            &model.params,
        );
        Ok(Pretrainer {
            replace: ReplacementRange::for_vocab(vocab),
            log: MetricsLog {
                num_sources: vocab.num_sources(),
                rows: Vec::new(),
            },
            model,
            vocab,
            config,
            prompter,
            docs,
            max_len,
            body_len,
            adam,
            step: 0,
        })
    }

    /// Continues from a saved optimizer state.
    pub fn resume(&mut self, adam: AdamState) -> Result<()> {
        if adam.m.len() != self.model.params.len() {
            return Err(Error::Data("optimizer state does not match the model".into()));
        }
        self.step = adam.step as usize;
        self.adam = adam;
        Ok(())
    }

    fn sample_body(&self, idx: u64) -> (usize, Vec<u32>) {
        let mut rng = stream_rng(self.config.seed, STREAM_DATA, idx);
        let (k, doc) = &self.docs[rng.random_range(0..self.docs.len())];
        if doc.len() <= self.body_len {
            return (*k, doc.clone());
        }
        let off = rng.random_range(0..=doc.len() - self.body_len);
        (*k, doc[off..off + self.body_len].to_vec())
    }

    fn prompted(&self, idx: u64, k: usize, body: Vec<u32>) -> Result<PromptedSample> {
        if !self.config.source_prompts {
            return Ok(PromptedSample::bare(body));
        }
        let mut rng = stream_rng(self.config.seed, STREAM_SP, idx);
        self.prompter
            .prompt_sample(&body, self.vocab.source_id(k), self.config.sp_include_prob, &mut rng)
    }

    /// Builds the batch for `step` (pure in the seed and step).
    pub fn batch(&self, step: usize) -> Result<TrainBatch> {
        let bs = self.config.batch_size;
        let mut sources = Vec::with_capacity(bs);
        let mut prompted = Vec::with_capacity(bs);
        for j in 0..bs {
            let idx = (step * bs + j) as u64;
            let (k, body) = self.sample_body(idx);
            sources.push(k);
            prompted.push(self.prompted(idx, k, body)?);
        }
        if self.model.config.architecture == Architecture::DecoderOnly {
            let with_bos: Vec<PromptedSample> = prompted.into_iter().map(|s| s.with_prefix(BOS)).collect();
            return Ok(make_causal_batch(&with_bos, &sources, self.max_len));
        }
        let mut masked = Vec::with_capacity(bs);
        for (j, s) in prompted.iter().enumerate() {
            let idx = (step * bs + j) as u64;
            let mut m = apply_mlm_masking(
                s,
                self.config.mlm_prob,
                self.replace,
                &mut stream_rng(self.config.seed, STREAM_MLM, idx),
            );
            if s.sp.is_some() {
                apply_msp_masking(
                    s,
                    &mut m,
                    self.config.sp_mask_prob,
                    &mut stream_rng(self.config.seed, STREAM_MSP, idx),
                )?;
            }
            masked.push(m);
        }
        Ok(match self.model.config.architecture {
            Architecture::EncoderOnly => make_mlm_batch(&masked, &sources),
            _ => make_seq2seq_batch(&masked, &sources, self.model.config.max_seq_len),
        })
    }

    /// One optimizer step; returns the step's metrics.
    pub fn step(&mut self) -> Result<MetricRow> {
        let batch = self.batch(self.step)?;
        let mut dropout_rng = stream_rng(self.config.seed, STREAM_DROPOUT, self.step as u64);
        let model = &*self.model;
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let hidden = match &batch.decoder {
            None if model.config.architecture == Architecture::EncoderOnly => {
                model.encoder_hidden(&mut tape, &p, &batch.inputs, Some(&mut dropout_rng))?
            }
            None => model.causal_hidden(&mut tape, &p, &batch.inputs, Some(&mut dropout_rng))?,
            Some(dec) => model.seq2seq_hidden(&mut tape, &p, &batch.inputs, dec, Some(&mut dropout_rng))?,
        };
        let mut rows: Vec<usize> = (0..batch.labels.len()).filter(|&i| batch.labels[i].is_some()).collect();
        if rows.is_empty() {
            rows.push(0);
        }
        let targets: Vec<Option<u32>> = rows.iter().map(|&r| batch.labels[r]).collect();
        let logits = model.project(&mut tape, &p, hidden, Some(&rows))?;
        let loss = tape.softmax_cross_entropy(logits, &targets)?;
        let row = self.metrics(&batch, &rows, &row_losses(tape.value(logits), &targets), tape.value(loss).data()[0]);
        tape.backward(loss)?;
        let mut grads: Vec<Tensor> = p.iter().map(|&v| tape.grad_tensor(v)).collect();
        drop(tape);
        if self.config.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > self.config.grad_clip {
                let s = self.config.grad_clip / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        let warm = self.config.warmup_steps;
        self.adam.config.lr = if warm > 0 && self.step < warm {
            self.config.learning_rate * (self.step + 1) as f64 / warm as f64
        } else {
            self.config.learning_rate
        };
        self.adam.step(&mut self.model.params, &grads)?;
        self.model.params.iter_mut().for_each(|t| round_f32(t.data_mut()));
        self.step += 1;
        Ok(MetricRow { step: self.step, ..row })
    }

    fn metrics(&self, batch: &TrainBatch, rows: &[usize], losses: &[Option<RowLoss>], loss: f64) -> MetricRow {
        let m = self.vocab.num_sources();
        let mut body = (0.0, 0usize);
        let mut src = (0.0, 0usize, 0usize);
        let mut per = vec![(0.0, 0usize); m];
        let seq = batch.labels.len() / batch.sources.len().max(1);
        for (&r, l) in rows.iter().zip(losses) {
            let Some(l) = l else { continue };
            if batch.kinds[r] == LabelKind::Source {
                src.0 += l.nll;
                src.1 += 1;
                src.2 += usize::from(l.correct);
            } else {
                body.0 += l.nll;
                body.1 += 1;
            }
            let k = batch.sources[r / seq];
            per[k].0 += l.nll;
            per[k].1 += 1;
        }
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        MetricRow {
            step: self.step,
            loss,
            mlm_loss: mean(body.0, body.1),
            msp_loss: mean(src.0, src.1),
            msp_acc: mean(src.2 as f64, src.1),
            per_source: per.into_iter().map(|(s, n)| mean(s, n)).collect(),
        }
    }

    /// Runs the remaining configured steps.
    pub fn run(&mut self) -> Result<&MetricsLog> {
        while self.step < self.config.steps {
            let row = self.step()?;
            if row.step % self.config.log_every == 0 || row.step == self.config.steps {
                self.log.rows.push(row);
            }
        }
        self.model.source_training = self.config.source_training();
        Ok(&self.log)
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn into_parts(self) -> (MetricsLog, AdamState) {
        (self.log, self.adam)
    }
}

/// Pre-trains `model` in place and returns the metrics log.
pub fn pretrain(
    model: &mut ModelState,
    vocab: &Vocabulary,
    registry: &CorpusRegistry,
    config: &PretrainConfig,
) -> Result<MetricsLog> {
    let mut t = Pretrainer::new(model, vocab, registry, config.clone())?;
    t.run()?;
    Ok(t.into_parts().0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::tokenizer::VocabOptions;

    fn setup(arch: Architecture) -> (ModelState, Vocabulary, CorpusRegistry) {
        let spec = SyntheticSpec::disjoint(2, 5, 12, 20, 0.5, 0);
        let reg = generate_synthetic(&spec, 1).unwrap();
        let vocab = Vocabulary::build(&reg, &VocabOptions::default()).unwrap();
        let mut cfg = ModelConfig::new(arch, vocab.len());
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ff = 32;
        cfg.max_seq_len = 16;
        (ModelState::init(cfg, 0).unwrap(), vocab, reg)
    }

    fn small(steps: usize) -> PretrainConfig {
        PretrainConfig {
            steps,
            batch_size: 4,
            sp_mask_prob: 0.3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (mut m, v, r) = setup(Architecture::EncoderOnly);
        let before = m.params.clone();
        let log = pretrain(&mut m, &v, &r, &small(0)).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(m.params, before);
    }

    #[test]
    fn deterministic_logs_for_every_architecture() {
        for arch in [Architecture::EncoderOnly, Architecture::EncoderDecoder, Architecture::DecoderOnly] {
            let (m0, v, r) = setup(arch);
            let (mut a, mut b) = (m0.clone(), m0);
            let la = pretrain(&mut a, &v, &r, &small(3)).unwrap();
            let lb = pretrain(&mut b, &v, &r, &small(3)).unwrap();
            assert_eq!(la.to_csv(), lb.to_csv());
            assert_eq!(la.rows.len(), 3);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn vocab_model_mismatch_fails_before_training() {
        let (mut m, _, r) = setup(Architecture::EncoderOnly);
        let other = Vocabulary::from_parts(&["a", "b"], vec!["x".into()]).unwrap();
        assert!(Pretrainer::new(&mut m, &other, &r, small(1)).is_err());
    }

    #[test]
    fn csv_header_names_sources_by_index() {
        assert_eq!(MetricsLog::header(2), "step,loss,mlm_loss,msp_loss,msp_acc,loss_src0,loss_src1");
        let (mut m, v, r) = setup(Architecture::EncoderOnly);
        let log = pretrain(&mut m, &v, &r, &small(1)).unwrap();
        assert_eq!(log.to_csv().lines().count(), 2);
    }
}
