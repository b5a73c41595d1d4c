//! Seeds several pre-training runs with and without source prompts and
//! compares held-out loss against the generator's own entropy gap.
//!
//! `cargo run --release --example compare_runs`

use splm::corpus::{analytic_entropy_gap, generate_split, StationaryMode, SyntheticSpec};
use splm::eval::{compare_runs, eval_lm, EvalOptions, SpMode};
use splm::model::{Architecture, ModelConfig, ModelState};
use splm::pretrain::{pretrain, PretrainConfig};
use splm::tokenizer::{VocabOptions, Vocabulary};

fn main() -> splm::Result<()> {
    let spec = SyntheticSpec::shared(4, 12, 16, 400, 1.0, 3).with_heldout(50);
    let gap = analytic_entropy_gap(&spec, StationaryMode::Exact)?.gap;
    let (mut baseline, mut prompted) = (Vec::new(), Vec::new());
    for seed in 1..=2 {
        let (train, heldout) = generate_split(&spec, seed)?;
        let vocab = Vocabulary::build(&train, &VocabOptions::default())?;
        let mut cfg = ModelConfig::new(Architecture::DecoderOnly, vocab.len());
        cfg.d_model = 32;
        cfg.d_ff = 128;
        cfg.max_seq_len = 19;
        for sp in [false, true] {
            let mut model = ModelState::init(cfg.clone(), seed)?;
            let pc = PretrainConfig {
                steps: 800,
                batch_size: 16,
                seed,
                source_prompts: sp,
                ..Default::default()
            };
            pretrain(&mut model, &vocab, &train, &pc)?;
            let mode = if sp { SpMode::WithSp } else { SpMode::WithoutSp };
            let loss = eval_lm(&model, &vocab, &heldout, mode, &EvalOptions::default())?.overall;
            println!("seed {seed} prompts={sp:<5} held-out loss {loss:.4}");
            if sp { prompted.push(loss) } else { baseline.push(loss) }
        }
    }
    let c = compare_runs(&baseline, &prompted)?;
    println!(
        "baseline - prompted: mean {:.4} (range {:.4}..{:.4}), same sign every seed: {}; generator gap {gap:.4}",
        c.mean_difference, c.min_difference, c.max_difference, c.sign_consistent
    );
    Ok(())
}
