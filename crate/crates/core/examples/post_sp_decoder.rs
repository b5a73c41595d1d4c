//! A decoder-only model with the source prompt after the body: the model
//! reads the document, then names its source.
//!
//! `cargo run --release --example post_sp_decoder`

use splm::corpus::{generate_split, SyntheticSpec};
use splm::finetune::predict_sources;
use splm::model::{Architecture, ModelConfig, ModelState};
use splm::pretrain::{pretrain, Placement, PretrainConfig};
use splm::tokenizer::{VocabOptions, Vocabulary};

fn main() -> splm::Result<()> {
    let spec = SyntheticSpec::disjoint(4, 25, 32, 300, 0.5, 0).with_heldout(20);
    let (train, heldout) = generate_split(&spec, 1)?;
    let vocab = Vocabulary::build(&train, &VocabOptions::default())?;

    let mut cfg = ModelConfig::new(Architecture::DecoderOnly, vocab.len());
    cfg.d_model = 32;
    cfg.d_ff = 128;
    cfg.max_seq_len = 35;
    let mut model = ModelState::init(cfg, 0)?;
    let cfg = PretrainConfig {
        steps: 400,
        batch_size: 16,
        placement: Placement::End,
        ..Default::default()
    };
    pretrain(&mut model, &vocab, &train, &cfg)?;

    let (truth, bodies): (Vec<usize>, Vec<Vec<u32>>) = heldout.documents().map(|(k, d)| (k, vocab.encode(d))).unzip();
    let predicted = predict_sources(&model, &vocab, &bodies, 32)?;
    let right = predicted.iter().zip(&truth).filter(|(p, t)| p == t).count();
    println!("named the source of {right}/{} held-out documents", truth.len());
    Ok(())
}
