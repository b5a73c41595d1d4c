//! The same sources under each naming policy, and what a textual prompt
//! looks like for each.
//!
//! `cargo run --example naming_policies`

use splm::corpus::{CorpusRegistry, NamingPolicy};
use splm::pretrain::{Placement, Prompter, SpTokenMode};
use splm::tokenizer::{VocabOptions, Vocabulary};

fn main() -> splm::Result<()> {
    let names = ["WIKI", "BOOK", "NEWS", "WEB"];
    let mut reg = CorpusRegistry::register(&names, NamingPolicy::abbreviation())?;
    for k in 0..names.len() {
        reg.add_document(k, "some body text");
    }
    for policy in [
        NamingPolicy::abbreviation(),
        NamingPolicy::Alphabet,
        NamingPolicy::misplaced(),
        NamingPolicy::parse("abbreviation:wiki,book corpus,cc news,open web text")?,
    ] {
        let reg = reg.with_policy(policy.clone())?;
        let vocab = Vocabulary::build(
            &reg,
            &VocabOptions {
                name_words: true,
                ..Default::default()
            },
        )?;
        let p = Prompter::new(&vocab, Placement::Start, SpTokenMode::Textual)?;
        let prompt: Vec<&str> = p.prompt_tokens(1).iter().map(|&t| vocab.token(t).unwrap_or("?")).collect();
        println!("{policy}: {:?}; BOOK prompt = {}", reg.display_names(), prompt.join(" "));
    }
    Ok(())
}
