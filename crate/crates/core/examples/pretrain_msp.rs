//! Pre-trains a small encoder with masked source prediction and checks how
//! well it recovers the source of held-out documents.
//!
//! `cargo run --release --example pretrain_msp`

use splm::corpus::{generate_split, SyntheticSpec};
use splm::eval::{eval_lm, eval_msp, EvalOptions, SpMode};
use splm::model::{Architecture, ModelConfig, ModelState};
use splm::pretrain::{pretrain, PretrainConfig};
use splm::tokenizer::{VocabOptions, Vocabulary};

fn main() -> splm::Result<()> {
    let spec = SyntheticSpec::disjoint(4, 25, 32, 300, 0.5, 0).with_heldout(25);
    let (train, heldout) = generate_split(&spec, 1)?;
    let vocab = Vocabulary::build(&train, &VocabOptions::default())?;

    let mut cfg = ModelConfig::new(Architecture::EncoderOnly, vocab.len());
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_ff = 128;
    cfg.max_seq_len = 34;
    let mut model = ModelState::init(cfg, 0)?;
    let log = pretrain(
        &mut model,
        &vocab,
        &train,
        &PretrainConfig {
            steps: 400,
            batch_size: 16,
            sp_mask_prob: 0.3,
            log_every: 100,
            ..Default::default()
        },
    )?;
    print!("{}", log.to_csv());

    let opts = EvalOptions::default();
    println!("held-out MSP accuracy: {:.3}", eval_msp(&model, &vocab, &heldout, &opts)?);
    print!("{}", eval_lm(&model, &vocab, &heldout, SpMode::WithSp, &opts)?.to_table());
    Ok(())
}
