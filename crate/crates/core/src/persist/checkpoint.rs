//! Binary checkpoints.
//!
//! Layout: `SPLM`, a little-endian `u32` format version, then tagged
//! sections, each a 4-byte tag, a `u64` payload length and the payload:
//!
//! | tag    | payload                                                    |
//! |--------|------------------------------------------------------------|
//! | `CONF` | model config as `key = value` text                         |
//! | `VOCB` | vocabulary, one token per line                             |
//! | `NAME` | naming policy and registered source names                  |
//! | `TASK` | optional: task kind, label inventory, SP assignment        |
//! | `PARM` | precision byte (32/64), `u32` tensor count, tensor data    |
//! | `ADAM` | optional: step, hyperparameters, first and second moments  |
//! | `RNGS` | `u64` seed, `u64` next step                                |
//!
//! Tensors appear in the model layout order as little-endian floats.

use std::path::Path;

use crate::corpus::NamingPolicy;
use crate::error::{Error, Result};
use crate::finetune::TaskKind;
use crate::model::{Architecture, ModelConfig, ModelState};
use crate::optim::{AdamConfig, AdamState};
use crate::persist::config::kv_lines;
use crate::persist::write_atomic;
use crate::pretrain::SourceTraining;
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"SPLM";
pub const FORMAT_VERSION: u32 = 1;
/// Magic plus version.
pub const HEADER_BYTES: usize = 8;
/// Tag plus length.
pub const SECTION_OVERHEAD: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// How a model's sources were named, and their registered names.
#[derive(Debug, Clone, PartialEq)]
pub struct NamingRecord {
    pub policy: NamingPolicy,
    pub registered: Vec<String>,
}

/// What a fine-tuned model was tuned for.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub sp_mode: String,
}

/// Seed and position of the counter-based training streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub vocab: Vocabulary,
    pub naming: NamingRecord,
    pub task: Option<TaskRecord>,
    pub adam: Option<AdamState>,
    pub rng: RngState,
}

fn conf_text(m: &ModelState) -> String {
    let c = &m.config;
    let mut s = format!(
        "architecture = {}\nd_model = {}\nn_layers = {}\nn_heads = {}\nd_ff = {}\nvocab_size = {}\nmax_seq_len = {}\ndropout = {}\nclassifier_classes = {}\ninit_seed = {}\n",
        c.architecture, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len, c.dropout, c.classifier_classes, m.init_seed
    );
    match &m.source_training {
        None => s.push_str("source_training = none\n"),
        Some(t) => s.push_str(&format!(
            "source_training = yes\nsp_include_prob = {}\nsp_mask_prob = {}\nplacement = {}\nsp_token_mode = {}\n",
            t.include_prob, t.mask_prob, t.placement, t.token_mode
        )),
    }
    s
}

fn section_err(section: &'static str, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        section,
        message: message.into(),
    }
}

fn utf8<'a>(section: &'static str, bytes: &'a [u8]) -> Result<&'a str> {
    std::str::from_utf8(bytes).map_err(|_| section_err(section, "payload is not UTF-8"))
}

fn parse_conf(bytes: &[u8]) -> Result<(ModelConfig, u64, Option<SourceTraining>)> {
    const S: &str = "CONF";
    let text = utf8(S, bytes)?;
    let mut map = std::collections::HashMap::new();
    for (_, k, v) in kv_lines(text, S).map_err(|e| section_err(S, e.to_string()))? {
        map.insert(k, v);
    }
    let get = |k: &str| map.get(k).copied().ok_or_else(|| section_err(S, format!("missing key {k}")));
    fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| section_err(S, format!("bad value {v:?} for {k}")))
    }
    let config = ModelConfig {
        architecture: get("architecture")?
            .parse::<Architecture>()
            .map_err(|e| section_err(S, e.to_string()))?,
        d_model: p("d_model", get("d_model")?)?,
        n_layers: p("n_layers", get("n_layers")?)?,
        n_heads: p("n_heads", get("n_heads")?)?,
        d_ff: p("d_ff", get("d_ff")?)?,
        vocab_size: p("vocab_size", get("vocab_size")?)?,
        max_seq_len: p("max_seq_len", get("max_seq_len")?)?,
        dropout: p("dropout", get("dropout")?)?,
        classifier_classes: p("classifier_classes", get("classifier_classes")?)?,
    };
    config.validate().map_err(|e| section_err(S, e.to_string()))?;
    let init_seed = p("init_seed", get("init_seed")?)?;
    let st = match get("source_training")? {
        "none" => None,
        "yes" => Some(SourceTraining {
            include_prob: p("sp_include_prob", get("sp_include_prob")?)?,
            mask_prob: p("sp_mask_prob", get("sp_mask_prob")?)?,
            placement: get("placement")?.parse().map_err(|e: Error| section_err(S, e.to_string()))?,
            token_mode: get("sp_token_mode")?.parse().map_err(|e: Error| section_err(S, e.to_string()))?,
        }),
        v => return Err(section_err(S, format!("bad source_training {v:?}"))),
    };
    Ok((config, init_seed, st))
}

fn name_text(n: &NamingRecord) -> String {
    let mut s = format!("policy = {}\n", n.policy);
    for r in &n.registered {
        s.push_str(&format!("source = {r}\n"));
    }
    s
}

fn parse_name(bytes: &[u8]) -> Result<NamingRecord> {
    const S: &str = "NAME";
    let mut policy = None;
    let mut registered = Vec::new();
    for (_, k, v) in kv_lines(utf8(S, bytes)?, S).map_err(|e| section_err(S, e.to_string()))? {
        match k {
            "policy" => policy = Some(NamingPolicy::parse(v).map_err(|e| section_err(S, e.to_string()))?),
            "source" => registered.push(v.to_string()),
            _ => return Err(section_err(S, format!("unknown key {k}"))),
        }
    }
    Ok(NamingRecord {
        policy: policy.ok_or_else(|| section_err(S, "missing policy"))?,
        registered,
    })
}

fn task_text(t: &TaskRecord) -> String {
    let mut s = format!("kind = {}\nsp_mode = {}\n", t.kind, t.sp_mode);
    for l in &t.labels {
        s.push_str(&format!("label = {l}\n"));
    }
    s
}

fn parse_task(bytes: &[u8]) -> Result<TaskRecord> {
    const S: &str = "TASK";
    let mut kind = None;
    let mut sp_mode = None;
    let mut labels = Vec::new();
    for (_, k, v) in kv_lines(utf8(S, bytes)?, S).map_err(|e| section_err(S, e.to_string()))? {
        match k {
            "kind" => kind = Some(v.parse::<TaskKind>().map_err(|e| section_err(S, e.to_string()))?),
            "sp_mode" => sp_mode = Some(v.to_string()),
            "label" => labels.push(v.to_string()),
            _ => return Err(section_err(S, format!("unknown key {k}"))),
        }
    }
    Ok(TaskRecord {
        kind: kind.ok_or_else(|| section_err(S, "missing kind"))?,
        labels,
        sp_mode: sp_mode.ok_or_else(|| section_err(S, "missing sp_mode"))?,
    })
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor, precision: Precision) {
    for &x in t.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
}

impl Checkpoint {
    /// Serialized bytes.
    pub fn to_bytes(&self, precision: Precision) -> Result<Vec<u8>> {
        if precision == Precision::F32 {
            let lossy = self.model.params.iter().any(|t| t.data().iter().any(|&x| (x as f32) as f64 != x));
            if lossy {
                return Err(Error::Contract(
                    "parameters are not f32-representable; save with 64-bit precision".into(),
                ));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_section(&mut out, b"CONF", conf_text(&self.model).as_bytes());
        put_section(&mut out, b"VOCB", self.vocab.to_text().as_bytes());
        put_section(&mut out, b"NAME", name_text(&self.naming).as_bytes());
        if let Some(t) = &self.task {
            put_section(&mut out, b"TASK", task_text(t).as_bytes());
        }
        let mut parm = vec![(precision.bytes() * 8) as u8];
        parm.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for t in &self.model.params {
            put_tensor(&mut parm, t, precision);
        }
        put_section(&mut out, b"PARM", &parm);
        if let Some(a) = &self.adam {
            let mut b = Vec::new();
            b.extend_from_slice(&a.step.to_le_bytes());
            for x in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                b.extend_from_slice(&x.to_le_bytes());
            }
            for t in a.m.iter().chain(&a.v) {
                put_tensor(&mut b, t, Precision::F64);
            }
            put_section(&mut out, b"ADAM", &b);
        }
        let mut r = Vec::new();
        r.extend_from_slice(&self.rng.seed.to_le_bytes());
        r.extend_from_slice(&self.rng.step.to_le_bytes());
        put_section(&mut out, b"RNGS", &r);
        Ok(out)
    }

    /// Parses checkpoint bytes. Nothing is constructed unless every
    /// section validates.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
            return Err(section_err("header", "missing SPLM magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut sections: Vec<(&'static str, &[u8])> = Vec::new();
        let mut pos = HEADER_BYTES;
        while pos < bytes.len() {
            if bytes.len() - pos < SECTION_OVERHEAD {
                return Err(section_err("section table", "truncated section header"));
            }
            let tag: &'static str = match &bytes[pos..pos + 4] {
                b"CONF" => "CONF",
                b"VOCB" => "VOCB",
                b"NAME" => "NAME",
                b"TASK" => "TASK",
                b"PARM" => "PARM",
                b"ADAM" => "ADAM",
                b"RNGS" => "RNGS",
                other => {
                    return Err(section_err(
                        "section table",
                        format!("unknown tag {:?}", String::from_utf8_lossy(other)),
                    ))
                }
            };
            let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap()) as usize;
            pos += SECTION_OVERHEAD;
            if bytes.len() - pos < len {
                return Err(section_err(
                    tag,
                    format!("truncated: declares {len} bytes, {} remain", bytes.len() - pos),
                ));
            }
            if sections.iter().any(|(t, _)| *t == tag) {
                return Err(section_err(tag, "appears twice"));
            }
            sections.push((tag, &bytes[pos..pos + len]));
            pos += len;
        }
        let find = |tag: &'static str| sections.iter().find(|(t, _)| *t == tag).map(|(_, b)| *b);
        let need = |tag: &'static str| find(tag).ok_or_else(|| section_err(tag, "missing"));

        let (config, init_seed, source_training) = parse_conf(need("CONF")?)?;
        let layout = config.layout();
        let counts: Vec<usize> = layout.shapes.iter().map(|s| s.iter().product()).collect();
        let total: usize = counts.iter().sum();

        let vocab = Vocabulary::parse(utf8("VOCB", need("VOCB")?)?).map_err(|e| section_err("VOCB", e.to_string()))?;
        if vocab.len() != config.vocab_size {
            return Err(section_err(
                "VOCB",
                format!("{} tokens but the config declares {}", vocab.len(), config.vocab_size),
            ));
        }
        let naming = parse_name(need("NAME")?)?;
        if naming.registered.len() != vocab.num_sources() {
            return Err(section_err("NAME", "source count differs from the vocabulary"));
        }
        let task = find("TASK").map(parse_task).transpose()?;

        let parm = need("PARM")?;
        if parm.len() < 5 {
            return Err(section_err("PARM", "truncated header"));
        }
        let precision = match parm[0] {
            32 => Precision::F32,
            64 => Precision::F64,
            b => return Err(section_err("PARM", format!("unknown precision {b}"))),
        };
        let n = u32::from_le_bytes(parm[1..5].try_into().unwrap()) as usize;
        if n != counts.len() {
            return Err(section_err("PARM", format!("{n} tensors but the config implies {}", counts.len())));
        }
        let want = 5 + total * precision.bytes();
        if parm.len() != want {
            return Err(section_err(
                "PARM",
                format!("{} bytes but the config implies {want}", parm.len()),
            ));
        }
        let mut r = &parm[5..];
        let params = read_tensors(&mut r, &layout.shapes, precision);
        let model = ModelState {
            source_training,
            ..ModelState::from_params(config, params, init_seed)?
        };

        let adam = match find("ADAM") {
            None => None,
            Some(b) => {
                let want = 40 + 2 * 8 * total;
                if b.len() != want {
                    return Err(section_err("ADAM", format!("{} bytes, expected {want}", b.len())));
                }
                let f = |i: usize| f64::from_le_bytes(b[8 + 8 * i..16 + 8 * i].try_into().unwrap());
                let mut r = &b[40..];
                let m = read_tensors(&mut r, &layout.shapes, Precision::F64);
                let v = read_tensors(&mut r, &layout.shapes, Precision::F64);
                Some(AdamState {
                    config: AdamConfig {
                        lr: f(0),
                        beta1: f(1),
                        beta2: f(2),
                        eps: f(3),
                    },
                    step: u64::from_le_bytes(b[..8].try_into().unwrap()),
                    m,
                    v,
                })
            }
        };
        let rngs = need("RNGS")?;
        if rngs.len() != 16 {
            return Err(section_err("RNGS", format!("{} bytes, expected 16", rngs.len())));
        }
        let rng = RngState {
            seed: u64::from_le_bytes(rngs[..8].try_into().unwrap()),
            step: u64::from_le_bytes(rngs[8..].try_into().unwrap()),
        };
        Ok(Checkpoint {
            model,
            vocab,
            naming,
            task,
            adam,
            rng,
        })
    }

    /// Display name of each source, from the vocabulary.
    pub fn display_names(&self) -> &[String] {
        self.vocab.source_names()
    }
}

fn read_tensors(r: &mut &[u8], shapes: &[Vec<usize>], precision: Precision) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let w = precision.bytes();
            let (head, rest) = r.split_at(n * w);
            *r = rest;
            let data = head
                .chunks_exact(w)
                .map(|c| match precision {
                    Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            Tensor::new(shape.clone(), data).expect("size checked against the layout")
        })
        .collect()
}

/// Writes `ckpt` atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path, precision: Precision) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes(precision)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
