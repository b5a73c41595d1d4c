use std::ops::Range;

use rand::Rng;

use super::{Placement, SpTokenMode};
use crate::error::{Error, Result};
use crate::tokenizer::{Vocabulary, MASK, SEP};

/// Where the source prompt sits inside a [`PromptedSample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpInfo {
    /// Source index (registration order).
    pub source: usize,
    pub placement: Placement,
    /// Positions holding the source prompt itself.
    pub sp_positions: Vec<usize>,
    /// Position of the delimiter between prompt and body.
    pub delimiter: usize,
    /// `[SEP]` filler that equalises textual prompt lengths.
    pub filler: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedSample {
    pub tokens: Vec<u32>,
    pub body: Range<usize>,
    pub sp: Option<SpInfo>,
}

impl PromptedSample {
    pub fn bare(body: Vec<u32>) -> Self {
        PromptedSample {
            body: 0..body.len(),
            tokens: body,
            sp: None,
        }
    }

    /// Prepends `token` (usually `[BOS]`), shifting every position.
    pub fn with_prefix(mut self, token: u32) -> Self {
        self.tokens.insert(0, token);
        self.body = self.body.start + 1..self.body.end + 1;
        if let Some(sp) = &mut self.sp {
            sp.sp_positions.iter_mut().for_each(|p| *p += 1);
            sp.filler.iter_mut().for_each(|p| *p += 1);
            sp.delimiter += 1;
        }
        self
    }

    pub fn body_tokens(&self) -> &[u32] {
        &self.tokens[self.body.clone()]
    }
}

/// Role of a labelled position, used to split the loss in metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Body,
    Source,
    Delimiter,
}

/// Model input after masking, with per-position labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub input: Vec<u32>,
    pub labels: Vec<Option<u32>>,
    pub kinds: Vec<LabelKind>,
}

/// Builds source-prompted layouts for one vocabulary.
#[derive(Debug, Clone)]
pub struct Prompter {
    placement: Placement,
    mode: SpTokenMode,
    /// Prompt tokens per source, before filler.
    names: Vec<Vec<u32>>,
    sp_len: usize,
    num_sources: usize,
}

impl Prompter {
    pub fn new(vocab: &Vocabulary, placement: Placement, mode: SpTokenMode) -> Result<Self> {
        let m = vocab.num_sources();
        let names: Vec<Vec<u32>> = match mode {
            SpTokenMode::Reserved => (0..m).map(|k| vec![vocab.source_id(k)]).collect(),
            SpTokenMode::Textual => (0..m).map(|k| vocab.name_tokens(k)).collect(),
        };
        for (k, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(&vocab.unk()) {
                return Err(Error::Data(format!(
                    "source name {:?} has no textual encoding in this vocabulary",
                    vocab.source_names()[k]
                )));
            }
        }
        let sp_len = names.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Prompter {
            placement,
            mode,
            names,
            sp_len,
            num_sources: m,
        })
    }

    pub fn placement(&self) -> Placement {
        self.placement
    }

    pub fn mode(&self) -> SpTokenMode {
        self.mode
    }

    /// Prompt length in tokens, filler included, delimiter excluded.
    pub fn sp_len(&self) -> usize {
        self.sp_len
    }

    /// Prompt tokens for source `k` (reserved id, or the spelled-out name).
    pub fn prompt_tokens(&self, k: usize) -> &[u32] {
        &self.names[k]
    }

    /// `[SRC][SEP]body` (start) or `body[SEP][SRC]` (end).
    pub fn prompt(&self, body: &[u32], source: usize) -> PromptedSample {
        let name = &self.names[source];
        let fill = self.sp_len - name.len();
        let mut tokens = Vec::with_capacity(body.len() + self.sp_len + 1);
        let (sp_start, delimiter, body_range);
        match self.placement {
            Placement::Start => {
                sp_start = 0;
                tokens.extend_from_slice(name);
                tokens.extend(std::iter::repeat_n(SEP, fill));
                delimiter = tokens.len();
                tokens.push(SEP);
                body_range = tokens.len()..tokens.len() + body.len();
                tokens.extend_from_slice(body);
            }
            Placement::End => {
                tokens.extend_from_slice(body);
                body_range = 0..body.len();
                delimiter = tokens.len();
                tokens.push(SEP);
                sp_start = tokens.len();
                tokens.extend_from_slice(name);
                tokens.extend(std::iter::repeat_n(SEP, fill));
            }
        }
        let filler_start = sp_start + name.len();
        PromptedSample {
            tokens,
            body: body_range,
            sp: Some(SpInfo {
                source,
                placement: self.placement,
                sp_positions: (sp_start..filler_start).collect(),
                delimiter,
                filler: (filler_start..filler_start + fill).collect(),
            }),
        }
    }

    /// With probability `rho` the prompted layout, otherwise the bare body.
    /// `source_id` must be a source token of the vocabulary.
    pub fn prompt_sample<R: Rng>(
        &self,
        body: &[u32],
        source_id: u32,
        rho: f64,
        rng: &mut R,
    ) -> Result<PromptedSample> {
        let k = source_id
            .checked_sub(crate::tokenizer::FIRST_SOURCE)
            .map(|k| k as usize)
            .filter(|&k| k < self.num_sources)
            .ok_or_else(|| Error::Contract(format!("token id {source_id} is not a source token")))?;
        if rng.random::<f64>() < rho {
            Ok(self.prompt(body, k))
        } else {
            Ok(PromptedSample::bare(body.to_vec()))
        }
    }
}

/// Token ids a random replacement may draw from.
#[derive(Debug, Clone, Copy)]
pub struct ReplacementRange {
    pub start: u32,
    pub end: u32,
}

impl ReplacementRange {
    pub fn for_vocab(v: &Vocabulary) -> Self {
        let start = v.first_base();
        let end = v.len() as u32;
        if start < end {
            ReplacementRange { start, end }
        } else {
            ReplacementRange {
                start: v.unk(),
                end: v.unk() + 1,
            }
        }
    }
}

/// Selects each body token with probability `mlm_prob`; a selected token
/// becomes `[MASK]` (80%), a random base token (10%) or stays (10%).
pub fn apply_mlm_masking<R: Rng>(
    sample: &PromptedSample,
    mlm_prob: f64,
    replace: ReplacementRange,
    rng: &mut R,
) -> MaskedSample {
    let n = sample.tokens.len();
    let mut out = MaskedSample {
        input: sample.tokens.clone(),
        labels: vec![None; n],
        kinds: vec![LabelKind::Body; n],
    };
    for i in sample.body.clone() {
        if rng.random::<f64>() >= mlm_prob {
            continue;
        }
        out.labels[i] = Some(sample.tokens[i]);
        let r: f64 = rng.random();
        if r < 0.8 {
            out.input[i] = MASK;
        } else if r < 0.9 {
            out.input[i] = rng.random_range(replace.start..replace.end);
        }
    }
    out
}

/// With probability `p` masks the whole source prompt, labelling each
/// prompt position with its original token.
pub fn apply_msp_masking<R: Rng>(
    sample: &PromptedSample,
    masked: &mut MaskedSample,
    p: f64,
    rng: &mut R,
) -> Result<bool> {
    let sp = sample
        .sp
        .as_ref()
        .ok_or_else(|| Error::Contract("masked source prediction needs a prompted sample".into()))?;
    if rng.random::<f64>() >= p {
        return Ok(false);
    }
    for &i in &sp.sp_positions {
        masked.input[i] = MASK;
        masked.labels[i] = Some(sample.tokens[i]);
        masked.kinds[i] = LabelKind::Source;
    }
    Ok(true)
}

/// Truncates the body from the right until the sample fits `max_len`;
/// prompt and delimiter are kept.
pub fn truncate(sample: &PromptedSample, max_len: usize) -> PromptedSample {
    let excess = sample.tokens.len().saturating_sub(max_len);
    if excess == 0 {
        return sample.clone();
    }
    let cut = excess.min(sample.body.len());
    let keep_end = sample.body.end - cut;
    let mut tokens = sample.tokens[..keep_end].to_vec();
    tokens.extend_from_slice(&sample.tokens[sample.body.end..]);
    let shift = |p: usize| if p >= sample.body.end { p - cut } else { p };
    PromptedSample {
        tokens,
        body: sample.body.start..keep_end,
        sp: sample.sp.as_ref().map(|sp| SpInfo {
            source: sp.source,
            placement: sp.placement,
            sp_positions: sp.sp_positions.iter().map(|&p| shift(p)).collect(),
            delimiter: shift(sp.delimiter),
            filler: sp.filler.iter().map(|&p| shift(p)).collect(),
        }),
    }
}

/// Next-token labels: position `i` predicts token `i + 1`. A start-placed
/// prompt is never a target, since nothing before it identifies it.
pub fn causal_labels(sample: &PromptedSample) -> (Vec<Option<u32>>, Vec<LabelKind>) {
    let n = sample.tokens.len();
    let mut labels = vec![None; n];
    let mut kinds = vec![LabelKind::Body; n];
    for i in 0..n.saturating_sub(1) {
        let t = i + 1;
        let (kind, skip) = match &sample.sp {
            Some(sp) if sp.sp_positions.contains(&t) => (LabelKind::Source, sp.placement == Placement::Start),
            Some(sp) if sp.delimiter == t || sp.filler.contains(&t) => (LabelKind::Delimiter, false),
            _ => (LabelKind::Body, false),
        };
        kinds[i] = kind;
        if !skip {
            labels[i] = Some(sample.tokens[t]);
        }
    }
    (labels, kinds)
}
