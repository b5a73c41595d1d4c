//! Shows how a body is wrapped with a source prompt in each placement and
//! token mode, and what MLM and masked source prediction do to it.
//!
//! `cargo run --example source_prompts`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splm::corpus::{CorpusRegistry, NamingPolicy};
use splm::pretrain::{apply_mlm_masking, apply_msp_masking, Placement, Prompter, ReplacementRange, SpTokenMode};
use splm::tokenizer::{VocabOptions, Vocabulary};

fn show(v: &Vocabulary, ids: &[u32]) -> String {
    ids.iter().map(|&i| v.token(i).unwrap_or("?")).collect::<Vec<_>>().join(" ")
}

fn main() -> splm::Result<()> {
    let mut reg = CorpusRegistry::register(&["WIKI", "NEWS"], NamingPolicy::abbreviation())?;
    reg.add_document(0, "a b c d e f g h");
    let v = Vocabulary::build(
        &reg,
        &VocabOptions {
            name_words: true,
            ..Default::default()
        },
    )?;
    let body = v.encode("a b c d e f g h");

    for mode in [SpTokenMode::Reserved, SpTokenMode::Textual] {
        for placement in [Placement::Start, Placement::End] {
            let p = Prompter::new(&v, placement, mode)?;
            println!("{:>8} {:>5}: {}", mode.to_string(), placement.to_string(), show(&v, &p.prompt(&body, 1).tokens));
        }
    }

    let p = Prompter::new(&v, Placement::Start, SpTokenMode::Reserved)?;
    let sample = p.prompt(&body, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut masked = apply_mlm_masking(&sample, 0.3, ReplacementRange::for_vocab(&v), &mut rng);
    apply_msp_masking(&sample, &mut masked, 1.0, &mut rng)?;
    println!("masked input: {}", show(&v, &masked.input));
    let labels: Vec<String> = masked
        .labels
        .iter()
        .map(|l| l.map_or("-".to_string(), |t| v.token(t).unwrap_or("?").to_string()))
        .collect();
    println!("labels:       {}", labels.join(" "));
    Ok(())
}
