//! Tiny pre-LN transformers: encoder-only, encoder-decoder and
//! decoder-only, all with learned positions and a tied output projection.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AttentionMask, Tape, Var};
use crate::error::{Error, Result};
use crate::pretrain::SourceTraining;
use crate::tensor::Tensor;
use crate::tokenizer::PAD;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    EncoderOnly,
    EncoderDecoder,
    DecoderOnly,
}

impl Architecture {
    pub fn is_mlm_family(self) -> bool {
        !matches!(self, Architecture::DecoderOnly)
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_only" | "encoder-only" => Ok(Architecture::EncoderOnly),
            "encoder_decoder" | "encoder-decoder" => Ok(Architecture::EncoderDecoder),
            "decoder_only" | "decoder-only" => Ok(Architecture::DecoderOnly),
            _ => Err(Error::Data(format!(
                "unknown architecture {s:?} (expected encoder_only, encoder_decoder or decoder_only)"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::EncoderOnly => "encoder_only",
            Architecture::EncoderDecoder => "encoder_decoder",
            Architecture::DecoderOnly => "decoder_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub d_model: usize,
    /// Layers per stack; encoder-decoder models have this many of each.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Size of the first-position classification head; 0 for none.
    pub classifier_classes: usize,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, vocab_size: usize) -> Self {
        ModelConfig {
            architecture,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 128,
            dropout: 0.0,
            classifier_classes: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("invalid model config: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads, d_ff and n_layers must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 3 {
            return bad(format!("max_seq_len {} < 3", self.max_seq_len));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn num_parameters(&self) -> usize {
        self.layout().shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zero,
    One,
}

#[derive(Debug, Clone)]
pub struct AttnIdx {
    ln_g: usize,
    ln_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone)]
pub struct LayerIdx {
    attn: AttnIdx,
    cross: Option<AttnIdx>,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Parameter names, shapes and the fixed order they are stored in.
#[derive(Debug, Clone)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    tok_emb: usize,
    pos_emb: usize,
    encoder: Vec<LayerIdx>,
    enc_ln: Option<(usize, usize)>,
    decoder: Vec<LayerIdx>,
    dec_ln: Option<(usize, usize)>,
    classifier: Option<(usize, usize)>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let mat = |l: &mut Self, n: &str| {
            (
                l.push(format!("{prefix}.w{n}"), vec![d, d], Init::Normal),
                l.push(format!("{prefix}.b{n}"), vec![d], Init::Zero),
            )
        };
        let ln_g = self.push(format!("{prefix}.ln.g"), vec![d], Init::One);
        let ln_b = self.push(format!("{prefix}.ln.b"), vec![d], Init::Zero);
        let (wq, bq) = mat(self, "q");
        let (wk, bk) = mat(self, "k");
        let (wv, bv) = mat(self, "v");
        let (wo, bo) = mat(self, "o");
        AttnIdx {
            ln_g,
            ln_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn layer(&mut self, prefix: &str, d: usize, ff: usize, cross: bool) -> LayerIdx {
        let attn = self.attn(&format!("{prefix}.attn"), d);
        let cross = cross.then(|| self.attn(&format!("{prefix}.cross"), d));
        LayerIdx {
            attn,
            cross,
            ln2_g: self.push(format!("{prefix}.ffn.ln.g"), vec![d], Init::One),
            ln2_b: self.push(format!("{prefix}.ffn.ln.b"), vec![d], Init::Zero),
            w1: self.push(format!("{prefix}.ffn.w1"), vec![d, ff], Init::Normal),
            b1: self.push(format!("{prefix}.ffn.b1"), vec![ff], Init::Zero),
            w2: self.push(format!("{prefix}.ffn.w2"), vec![ff, d], Init::Normal),
            b2: self.push(format!("{prefix}.ffn.b2"), vec![d], Init::Zero),
        }
    }

    fn final_ln(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.push(format!("{prefix}.ln.g"), vec![d], Init::One),
            self.push(format!("{prefix}.ln.b"), vec![d], Init::Zero),
        )
    }

    fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut l = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            tok_emb: 0,
            pos_emb: 0,
            encoder: Vec::new(),
            enc_ln: None,
            decoder: Vec::new(),
            dec_ln: None,
            classifier: None,
        };
        l.tok_emb = l.push("tok_emb".into(), vec![c.vocab_size, d], Init::Normal);
        l.pos_emb = l.push("pos_emb".into(), vec![c.max_seq_len, d], Init::Normal);
        if c.architecture != Architecture::DecoderOnly {
            for i in 0..c.n_layers {
                let layer = l.layer(&format!("enc.{i}"), d, c.d_ff, false);
                l.encoder.push(layer);
            }
            l.enc_ln = Some(l.final_ln("enc.final", d));
        }
        if c.architecture != Architecture::EncoderOnly {
            let cross = c.architecture == Architecture::EncoderDecoder;
            for i in 0..c.n_layers {
                let layer = l.layer(&format!("dec.{i}"), d, c.d_ff, cross);
                l.decoder.push(layer);
            }
            l.dec_ln = Some(l.final_ln("dec.final", d));
        }
        if c.classifier_classes > 0 {
            l.classifier = Some((
                l.push("cls.w".into(), vec![d, c.classifier_classes], Init::Normal),
                l.push("cls.b".into(), vec![c.classifier_classes], Init::Zero),
            ));
        }
        l
    }
}

/// A padded batch of token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
    /// `true` at real (non-pad) positions.
    pub valid: Vec<bool>,
}

impl TokenBatch {
    /// Right-pads `rows` with `[PAD]` to the longest row.
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        Self::padded(rows, seq)
    }

    pub fn padded(rows: &[Vec<u32>], seq: usize) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut valid = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            assert!(r.len() <= seq, "row longer than padded length");
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(PAD, seq - r.len()));
            valid.extend(std::iter::repeat_n(true, r.len()));
            valid.extend(std::iter::repeat_n(false, seq - r.len()));
        }
        TokenBatch {
            ids,
            batch: rows.len(),
            seq,
            valid,
        }
    }
}

/// Parameters plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    pub init_seed: u64,
    /// How source prompts were used in pre-training; `None` if never.
    pub source_training: Option<SourceTraining>,
}

/// Rounds to the nearest `f32`, so values survive 32-bit checkpoints.
pub(crate) fn round_f32(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::One => Tensor::full(shape, 1.0),
        Init::Normal => {
            let normal = Normal::new(0.0, INIT_STD).expect("valid std");
            let n: usize = shape.iter().product();
            let mut data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
            round_f32(&mut data);
            Tensor::new(shape.to_vec(), data).expect("shape")
        }
    }
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    p: &'a [Var],
    dropout: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'_> {
    fn drop(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => {
                let n = self.tape.value(x).len();
                let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= self.dropout).collect();
                self.tape.dropout(x, &keep, self.dropout)
            }
            _ => Ok(x),
        }
    }
}

impl ModelState {
    /// Weights ~ Normal(0, 0.02), biases 0, layer-norm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(s, &i)| init_tensor(s, i, &mut rng))
            .collect();
        Ok(ModelState {
            config,
            params,
            init_seed: seed,
            source_training: None,
        })
    }

    /// Rebuilds a model from stored parameters, checking the layout.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if params.len() != layout.shapes.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, got {}",
                layout.shapes.len(),
                params.len()
            )));
        }
        for ((p, s), n) in params.iter().zip(&layout.shapes).zip(&layout.names) {
            if p.shape() != s.as_slice() {
                return Err(Error::Data(format!(
                    "parameter {n} has shape {:?}, expected {s:?}",
                    p.shape()
                )));
            }
            if !p.all_finite() {
                return Err(Error::Data(format!("parameter {n} has non-finite values")));
            }
        }
        Ok(ModelState {
            config,
            params,
            init_seed,
            source_training: None,
        })
    }

    /// Same model with a fresh `classes`-way first-position head.
    pub fn with_classifier(&self, classes: usize, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.classifier_classes = classes;
        let layout = config.layout();
        let mut params: Vec<Tensor> = self.params.clone();
        params.truncate(self.config.layout().classifier.map_or(self.params.len(), |(w, _)| w));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xC1A5);
        for i in params.len()..layout.shapes.len() {
            params.push(init_tensor(&layout.shapes[i], layout.inits[i], &mut rng));
        }
        let mut m = ModelState::from_params(config, params, self.init_seed)?;
        m.source_training = self.source_training.clone();
        Ok(m)
    }

    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `tape`, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn expect(&self, archs: &[Architecture], what: &str) -> Result<()> {
        if archs.contains(&self.config.architecture) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{what} is not available for a {} model",
                self.config.architecture
            )))
        }
    }

    fn check_input(&self, input: &TokenBatch) -> Result<()> {
        if input.seq > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                input.seq, self.config.max_seq_len
            )));
        }
        if input.ids.len() != input.batch * input.seq || input.valid.len() != input.ids.len() {
            return Err(Error::dim("token_batch", &[input.ids.len()], &[input.batch, input.seq]));
        }
        Ok(())
    }

    fn embed(&self, cx: &mut Ctx, l: &Layout, input: &TokenBatch) -> Result<Var> {
        self.check_input(input)?;
        let tok = cx.tape.embedding(cx.p[l.tok_emb], &input.ids)?;
        let positions: Vec<u32> = (0..input.batch).flat_map(|_| 0..input.seq as u32).collect();
        let pos = cx.tape.embedding(cx.p[l.pos_emb], &positions)?;
        let x = cx.tape.add(tok, pos)?;
        cx.drop(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        cx: &mut Ctx,
        a: &AttnIdx,
        x: Var,
        memory: Option<(Var, usize)>,
        batch: usize,
        tq: usize,
        key_valid: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let p = cx.p;
        let h = cx.tape.layer_norm(x, p[a.ln_g], p[a.ln_b], LN_EPS)?;
        let (kv_src, tk) = memory.unwrap_or((h, tq));
        let proj = |t: &mut Tape, src: Var, w: usize, b: usize| -> Result<Var> {
            let m = t.matmul(src, p[w], false)?;
            t.add_bias(m, p[b])
        };
        let q = proj(cx.tape, h, a.wq, a.bq)?;
        let q = cx.tape.scale(q, 1.0 / (dh as f64).sqrt());
        let k = proj(cx.tape, kv_src, a.wk, a.bk)?;
        let v = proj(cx.tape, kv_src, a.wv, a.bv)?;
        let q = cx.tape.split_heads(q, batch, tq, heads)?;
        let k = cx.tape.split_heads(k, batch, tk, heads)?;
        let v = cx.tape.split_heads(v, batch, tk, heads)?;
        let scores = cx.tape.batch_matmul(q, k, true)?;
        let probs = cx.tape.masked_softmax(
            scores,
            AttentionMask {
                batch,
                heads,
                queries: tq,
                keys: tk,
                key_valid: key_valid.to_vec(),
                causal,
            },
        )?;
        let ctx = cx.tape.batch_matmul(probs, v, false)?;
        let ctx = cx.tape.merge_heads(ctx, batch, heads)?;
        let out = proj(cx.tape, ctx, a.wo, a.bo)?;
        let out = cx.drop(out)?;
        cx.tape.add(x, out)
    }

    fn ffn(&self, cx: &mut Ctx, layer: &LayerIdx, x: Var) -> Result<Var> {
        let p = cx.p;
        let h = cx.tape.layer_norm(x, p[layer.ln2_g], p[layer.ln2_b], LN_EPS)?;
        let u = cx.tape.matmul(h, p[layer.w1], false)?;
        let u = cx.tape.add_bias(u, p[layer.b1])?;
        let u = cx.tape.gelu(u);
        let o = cx.tape.matmul(u, p[layer.w2], false)?;
        let o = cx.tape.add_bias(o, p[layer.b2])?;
        let o = cx.drop(o)?;
        cx.tape.add(x, o)
    }

    fn stack(
        &self,
        cx: &mut Ctx,
        layers: &[LayerIdx],
        final_ln: (usize, usize),
        mut x: Var,
        input: &TokenBatch,
        causal: bool,
        memory: Option<(Var, &TokenBatch)>,
    ) -> Result<Var> {
        for layer in layers {
            x = self.attention(cx, &layer.attn, x, None, input.batch, input.seq, &input.valid, causal)?;
            if let (Some(c), Some((mem, src))) = (&layer.cross, memory) {
                x = self.attention(cx, c, x, Some((mem, src.seq)), input.batch, input.seq, &src.valid, false)?;
            }
            x = self.ffn(cx, layer, x)?;
        }
        cx.tape.layer_norm(x, cx.p[final_ln.0], cx.p[final_ln.1], LN_EPS)
    }

    /// Final bidirectional encoder states `[B·T, d]`.
    pub fn encoder_hidden(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &TokenBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.expect(&[Architecture::EncoderOnly, Architecture::EncoderDecoder], "encoder")?;
        let l = self.layout();
        let mut cx = Ctx {
            tape,
            p,
            dropout: self.config.dropout,
            rng,
        };
        let x = self.embed(&mut cx, &l, input)?;
        self.stack(&mut cx, &l.encoder, l.enc_ln.unwrap(), x, input, false, None)
    }

    /// Final causal decoder states `[B·T, d]`.
    pub fn causal_hidden(
        &self,
        tape: &mut Tape,
        p: &[Var],
        input: &TokenBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.expect(&[Architecture::DecoderOnly], "causal decoding")?;
        let l = self.layout();
        let mut cx = Ctx {
            tape,
            p,
            dropout: self.config.dropout,
            rng,
        };
        let x = self.embed(&mut cx, &l, input)?;
        self.stack(&mut cx, &l.decoder, l.dec_ln.unwrap(), x, input, true, None)
    }

    /// Encoder over `src`, then causal decoder over `tgt` with
    /// cross-attention; returns decoder states `[B·Tt, d]`.
    pub fn seq2seq_hidden(
        &self,
        tape: &mut Tape,
        p: &[Var],
        src: &TokenBatch,
        tgt: &TokenBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.expect(&[Architecture::EncoderDecoder], "sequence-to-sequence decoding")?;
        if src.batch != tgt.batch {
            return Err(Error::dim("seq2seq", &[src.batch], &[tgt.batch]));
        }
        let l = self.layout();
        let memory = {
            let mut cx = Ctx {
                tape: &mut *tape,
                p,
                dropout: self.config.dropout,
                rng: rng.as_deref_mut(),
            };
            let x = self.embed(&mut cx, &l, src)?;
            self.stack(&mut cx, &l.encoder, l.enc_ln.unwrap(), x, src, false, None)?
        };
        let mut cx = Ctx {
            tape,
            p,
            dropout: self.config.dropout,
            rng,
        };
        let y = self.embed(&mut cx, &l, tgt)?;
        self.stack(&mut cx, &l.decoder, l.dec_ln.unwrap(), y, tgt, true, Some((memory, src)))
    }

    /// Tied output projection of `hidden` (optionally only `rows`): `[n, V]`.
    pub fn project(&self, tape: &mut Tape, p: &[Var], hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => tape.select_rows(hidden, r)?,
            None => hidden,
        };
        tape.matmul(h, p[self.layout().tok_emb], true)
    }

    /// Classification logits `[B, C]` from each row's first position.
    pub fn classify(&self, tape: &mut Tape, p: &[Var], hidden: Var, batch: usize, seq: usize) -> Result<Var> {
        let Some((w, b)) = self.layout().classifier else {
            return Err(Error::Contract("model has no classification head".into()));
        };
        let rows: Vec<usize> = (0..batch).map(|i| i * seq).collect();
        let h = tape.select_rows(hidden, &rows)?;
        let z = tape.matmul(h, p[w], false)?;
        tape.add_bias(z, p[b])
    }

    fn logits3(&self, tape: &mut Tape, p: &[Var], hidden: Var, batch: usize, seq: usize) -> Result<Tensor> {
        let z = self.project(tape, p, hidden, None)?;
        tape.value(z).clone().reshaped(&[batch, seq, self.config.vocab_size])
    }

    /// Logits `[B, T, V]` of a bidirectional encoder.
    pub fn forward_encoder(&self, input: &TokenBatch) -> Result<Tensor> {
        self.expect(&[Architecture::EncoderOnly], "forward_encoder")?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let h = self.encoder_hidden(&mut tape, &p, input, None)?;
        self.logits3(&mut tape, &p, h, input.batch, input.seq)
    }

    /// Next-token logits `[B, T, V]`.
    pub fn forward_causal(&self, input: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let h = self.causal_hidden(&mut tape, &p, input, None)?;
        self.logits3(&mut tape, &p, h, input.batch, input.seq)
    }

    /// Decoder logits `[B, Tt, V]`.
    pub fn forward_seq2seq(&self, src: &TokenBatch, tgt: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let h = self.seq2seq_hidden(&mut tape, &p, src, tgt, None)?;
        self.logits3(&mut tape, &p, h, tgt.batch, tgt.seq)
    }
}
