//! Saves a model with its vocabulary and naming, reloads it, and confirms
//! the logits are bit-for-bit the same.
//!
//! `cargo run --example checkpoint -- /tmp/model.ckpt`

use splm::cli::inspect;
use splm::corpus::{generate_synthetic, NamingPolicy, SyntheticSpec};
use splm::model::{Architecture, ModelConfig, ModelState, TokenBatch};
use splm::persist::{load_checkpoint, save_checkpoint, Checkpoint, NamingRecord, Precision, RngState};
use splm::tokenizer::{VocabOptions, Vocabulary};

fn main() -> splm::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "target/example.ckpt".into());
    let reg = generate_synthetic(&SyntheticSpec::disjoint(3, 8, 16, 10, 0.5, 0), 0)?;
    let vocab = Vocabulary::build(&reg, &VocabOptions::default())?;
    let mut cfg = ModelConfig::new(Architecture::EncoderDecoder, vocab.len());
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    let ckpt = Checkpoint {
        model: ModelState::init(cfg, 1)?,
        vocab,
        naming: NamingRecord {
            policy: NamingPolicy::Alphabet,
            registered: reg.names(),
        },
        task: None,
        adam: None,
        rng: RngState::default(),
    };
    save_checkpoint(&ckpt, path.as_ref(), Precision::F32)?;
    let back = load_checkpoint(path.as_ref())?;
    print!("{}", inspect(&back));

    let src = TokenBatch::from_rows(&[vec![5, 9, 10, 11]]);
    let tgt = TokenBatch::from_rows(&[vec![1, 9]]);
    let a = ckpt.model.forward_seq2seq(&src, &tgt)?;
    let b = back.model.forward_seq2seq(&src, &tgt)?;
    println!(
        "{} bytes on disk; logits identical: {}",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    );
    Ok(())
}
