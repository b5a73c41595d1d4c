//! Flat `key = value` run configuration.

use std::path::Path;
use std::str::FromStr;

use crate::corpus::NamingPolicy;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::{Architecture, ModelConfig};
use crate::pretrain::PretrainConfig;
use crate::tokenizer::VocabOptions;

/// Model shape without the vocabulary size, which comes from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub architecture: Architecture,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(Architecture::EncoderOnly, 1);
        ModelShape {
            architecture: c.architecture,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_seq_len: c.max_seq_len,
            dropout: c.dropout,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            architecture: self.architecture,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            classifier_classes: 0,
        }
    }
}

/// Every setting a pipeline run reads.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelShape,
    pub vocab: VocabOptions,
    pub naming: NamingPolicy,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval_rotation: usize,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelShape::default(),
            vocab: VocabOptions::default(),
            naming: NamingPolicy::abbreviation(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval_rotation: 7,
            eval_batch_size: 32,
        }
    }
}

/// Non-comment `(line, key, value)` triples of a `key = value` text.
pub(crate) fn kv_lines<'a>(text: &'a str, origin: &str) -> Result<Vec<(usize, &'a str, &'a str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn prob(key: &str, v: &str) -> std::result::Result<f64, String> {
    let p: f64 = num(key, v)?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("{key} = {v} outside the range [0, 1]"))
    }
}

fn positive(key: &str, v: &str) -> std::result::Result<usize, String> {
    match num::<usize>(key, v)? {
        0 => Err(format!("{key} must be positive")),
        n => Ok(n),
    }
}

fn optional(key: &str, v: &str) -> std::result::Result<Option<usize>, String> {
    if v == "none" {
        Ok(None)
    } else {
        positive(key, v).map(Some)
    }
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, found {v:?}")),
    }
}

fn parsed<T: FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|e: Error| e.to_string())
}

fn show_opt(v: Option<usize>) -> String {
    v.map_or("none".into(), |n| n.to_string())
}

impl RunConfig {
    /// Parses a config text; absent keys keep their defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (line, key, v) in kv_lines(text, origin)? {
            c.set(key, v).map_err(|message| Error::Parse {
                path: origin.to_string(),
                line,
                message,
            })?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (m, p, f) = (&mut self.model, &mut self.pretrain, &mut self.finetune);
        match key {
            "architecture" => m.architecture = parsed(v)?,
            "d_model" => m.d_model = positive(key, v)?,
            "n_layers" => m.n_layers = positive(key, v)?,
            "n_heads" => m.n_heads = positive(key, v)?,
            "d_ff" => m.d_ff = positive(key, v)?,
            "max_seq_len" => m.max_seq_len = positive(key, v)?,
            "dropout" => m.dropout = prob(key, v)?,
            "max_base_tokens" => self.vocab.max_base_tokens = optional(key, v)?,
            "min_frequency" => self.vocab.min_frequency = positive(key, v)?,
            "name_words" => self.vocab.name_words = flag(key, v)?,
            "extra_words" => self.vocab.extra_words = v.split_whitespace().map(String::from).collect(),
            "naming" => self.naming = NamingPolicy::parse(v).map_err(|e| e.to_string())?,
            "mlm_prob" => p.mlm_prob = prob(key, v)?,
            "sp_mask_prob" => p.sp_mask_prob = prob(key, v)?,
            "sp_include_prob" => p.sp_include_prob = prob(key, v)?,
            "placement" => p.placement = parsed(v)?,
            "sp_token_mode" => p.sp_token_mode = parsed(v)?,
            "source_prompts" => p.source_prompts = flag(key, v)?,
            "steps" => p.steps = num(key, v)?,
            "batch_size" => p.batch_size = positive(key, v)?,
            "learning_rate" => p.learning_rate = positive_f64(key, v)?,
            "warmup_steps" => p.warmup_steps = num(key, v)?,
            "grad_clip" => p.grad_clip = non_negative(key, v)?,
            "max_len" => p.max_len = optional(key, v)?,
            "seed" => {
                p.seed = num(key, v)?;
                f.seed = p.seed;
            }
            "log_every" => p.log_every = positive(key, v)?,
            "epochs" => f.epochs = num(key, v)?,
            "finetune_batch_size" => f.batch_size = positive(key, v)?,
            "finetune_learning_rate" => f.learning_rate = positive_f64(key, v)?,
            "validation_fraction" => {
                f.validation_fraction = prob(key, v)?;
                if f.validation_fraction >= 1.0 {
                    return Err(format!("{key} must be below 1"));
                }
            }
            "eval_rotation" => self.eval_rotation = positive(key, v)?,
            "eval_batch_size" => self.eval_batch_size = positive(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Overrides the seed for every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    /// Canonical text listing every key; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, p, f) = (&self.model, &self.pretrain, &self.finetune);
        vec![
            ("architecture", m.architecture.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("max_seq_len", m.max_seq_len.to_string()),
            ("dropout", m.dropout.to_string()),
            ("max_base_tokens", show_opt(self.vocab.max_base_tokens)),
            ("min_frequency", self.vocab.min_frequency.to_string()),
            ("name_words", self.vocab.name_words.to_string()),
            ("extra_words", self.vocab.extra_words.join(" ")),
            ("naming", self.naming.to_string()),
            ("mlm_prob", p.mlm_prob.to_string()),
            ("sp_mask_prob", p.sp_mask_prob.to_string()),
            ("sp_include_prob", p.sp_include_prob.to_string()),
            ("placement", p.placement.to_string()),
            ("sp_token_mode", p.sp_token_mode.to_string()),
            ("source_prompts", p.source_prompts.to_string()),
            ("steps", p.steps.to_string()),
            ("batch_size", p.batch_size.to_string()),
            ("learning_rate", p.learning_rate.to_string()),
            ("warmup_steps", p.warmup_steps.to_string()),
            ("grad_clip", p.grad_clip.to_string()),
            ("max_len", show_opt(p.max_len)),
            ("seed", p.seed.to_string()),
            ("log_every", p.log_every.to_string()),
            ("epochs", f.epochs.to_string()),
            ("finetune_batch_size", f.batch_size.to_string()),
            ("finetune_learning_rate", f.learning_rate.to_string()),
            ("validation_fraction", f.validation_fraction.to_string()),
            ("eval_rotation", self.eval_rotation.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
        ]
    }
}

fn positive_f64(key: &str, v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} must be a positive number"))
    }
}

fn non_negative(key: &str, v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(key, v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} must be non-negative"))
    }
}

/// Reads a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)
}
