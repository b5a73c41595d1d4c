use super::prompt::{causal_labels, truncate, LabelKind, MaskedSample, PromptedSample};
use crate::model::TokenBatch;
use crate::tensor::Tensor;
use crate::tokenizer::MASK;

/// Collated model inputs with one label slot per labelled-side position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// Encoder input (MLM family) or the whole sequence (causal).
    pub inputs: TokenBatch,
    /// Decoder input for encoder-decoder models.
    pub decoder: Option<TokenBatch>,
    /// `batch × seq` of the labelled side (decoder when present).
    pub labels: Vec<Option<u32>>,
    pub kinds: Vec<LabelKind>,
    /// True source per sample.
    pub sources: Vec<usize>,
}

fn pad_labels(rows: &[(Vec<Option<u32>>, Vec<LabelKind>)], seq: usize) -> (Vec<Option<u32>>, Vec<LabelKind>) {
    let mut labels = Vec::with_capacity(rows.len() * seq);
    let mut kinds = Vec::with_capacity(rows.len() * seq);
    for (l, k) in rows {
        labels.extend_from_slice(l);
        labels.extend(std::iter::repeat_n(None, seq - l.len()));
        kinds.extend_from_slice(k);
        kinds.extend(std::iter::repeat_n(LabelKind::Body, seq - k.len()));
    }
    (labels, kinds)
}

/// Next-token batch: labels are the inputs shifted left by one; pad
/// positions carry no label.
pub fn make_causal_batch(samples: &[PromptedSample], sources: &[usize], max_len: usize) -> TrainBatch {
    let fitted: Vec<PromptedSample> = samples.iter().map(|s| truncate(s, max_len)).collect();
    let inputs = TokenBatch::from_rows(&fitted.iter().map(|s| s.tokens.clone()).collect::<Vec<_>>());
    let rows: Vec<_> = fitted.iter().map(causal_labels).collect();
    let (labels, kinds) = pad_labels(&rows, inputs.seq);
    TrainBatch {
        inputs,
        decoder: None,
        labels,
        kinds,
        sources: sources.to_vec(),
    }
}

/// Masked-LM batch; labels sit at the masked encoder positions.
pub fn make_mlm_batch(masked: &[MaskedSample], sources: &[usize]) -> TrainBatch {
    let inputs = TokenBatch::from_rows(&masked.iter().map(|m| m.input.clone()).collect::<Vec<_>>());
    let rows: Vec<_> = masked.iter().map(|m| (m.labels.clone(), m.kinds.clone())).collect();
    let (labels, kinds) = pad_labels(&rows, inputs.seq);
    TrainBatch {
        inputs,
        decoder: None,
        labels,
        kinds,
        sources: sources.to_vec(),
    }
}

/// Encoder-decoder batch: the decoder spells out the masked tokens in
/// order as `[MASK] x₁ [MASK] x₂ …`, each `[MASK]` predicting the next
/// original token. At most `max_dec_len / 2` masked positions per sample
/// are reconstructed.
pub fn make_seq2seq_batch(masked: &[MaskedSample], sources: &[usize], max_dec_len: usize) -> TrainBatch {
    let inputs = TokenBatch::from_rows(&masked.iter().map(|m| m.input.clone()).collect::<Vec<_>>());
    let mut dec_rows = Vec::with_capacity(masked.len());
    let mut label_rows = Vec::with_capacity(masked.len());
    for m in masked {
        let mut dec = Vec::new();
        let mut labels = Vec::new();
        let mut kinds = Vec::new();
        for (i, l) in m.labels.iter().enumerate() {
            let Some(t) = *l else { continue };
            if dec.len() + 2 > max_dec_len {
                break;
            }
            dec.extend([MASK, t]);
            labels.extend([Some(t), None]);
            kinds.extend([m.kinds[i], LabelKind::Body]);
        }
        dec_rows.push(dec);
        label_rows.push((labels, kinds));
    }
    let seq = dec_rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let decoder = TokenBatch::padded(&dec_rows, seq);
    let (labels, kinds) = pad_labels(&label_rows, seq);
    TrainBatch {
        inputs,
        decoder: Some(decoder),
        labels,
        kinds,
        sources: sources.to_vec(),
    }
}

/// Per-row negative log-likelihood and argmax hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowLoss {
    pub nll: f64,
    pub correct: bool,
}

/// Scores each row of `[n, V]` logits against its target.
pub fn row_losses(logits: &Tensor, targets: &[Option<u32>]) -> Vec<Option<RowLoss>> {
    let v = logits.last_dim();
    targets
        .iter()
        .enumerate()
        .map(|(r, t)| {
            let t = (*t)? as usize;
            let row = &logits.data()[r * v..(r + 1) * v];
            let (mut arg, mut max) = (0, f64::NEG_INFINITY);
            for (i, &z) in row.iter().enumerate() {
                if z > max {
                    max = z;
                    arg = i;
                }
            }
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            Some(RowLoss {
                nll: lse - row[t],
                correct: arg == t,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_lengths_pad_with_ignore() {
        let b = make_causal_batch(
            &[PromptedSample::bare(vec![9, 10, 11]), PromptedSample::bare(vec![9])],
            &[0, 1],
            8,
        );
        assert_eq!(b.inputs.seq, 3);
        assert_eq!(b.labels, vec![Some(10), Some(11), None, None, None, None]);
        assert!(b.inputs.valid[3] && !b.inputs.valid[4]);
    }

    #[test]
    fn seq2seq_decoder_layout() {
        let m = MaskedSample {
            input: vec![1, 20, 1],
            labels: vec![Some(9), None, Some(21)],
            kinds: vec![LabelKind::Source, LabelKind::Body, LabelKind::Body],
        };
        let b = make_seq2seq_batch(&[m], &[0], 16);
        let dec = b.decoder.unwrap();
        assert_eq!(dec.ids, vec![MASK, 9, MASK, 21]);
        assert_eq!(b.labels, vec![Some(9), None, Some(21), None]);
        assert_eq!(b.kinds[0], LabelKind::Source);
    }

    #[test]
    fn row_losses_uniform() {
        let t = Tensor::zeros(&[2, 4]);
        let r = row_losses(&t, &[Some(1), None]);
        assert!((r[0].unwrap().nll - 4f64.ln()).abs() < 1e-12);
        assert!(r[1].is_none());
    }
}
