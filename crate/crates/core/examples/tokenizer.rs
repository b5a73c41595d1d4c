//! Vocabulary construction: special tokens, one reserved id per source, then
//! base words by frequency.
//!
//! `cargo run --example tokenizer`

use splm::corpus::{CorpusRegistry, NamingPolicy};
use splm::tokenizer::{VocabOptions, Vocabulary};

fn main() -> splm::Result<()> {
    let mut reg = CorpusRegistry::register(&["WIKI", "NEWS"], NamingPolicy::abbreviation())?;
    reg.add_document(0, "the cat sat on the mat");
    reg.add_document(1, "markets fell on the news");

    let plain = Vocabulary::build(&reg, &VocabOptions::default())?;
    for k in 0..plain.num_sources() {
        println!("source {} -> reserved id {}", plain.source_names()[k], plain.source_id(k));
    }
    let ids = plain.encode("the dog sat");
    println!("encode(\"the dog sat\") = {ids:?} -> {:?}", plain.decode(&ids)?);

    // Textual prompts need the display-name words in the vocabulary.
    let named = Vocabulary::build(
        &reg,
        &VocabOptions {
            name_words: true,
            ..Default::default()
        },
    )?;
    println!("{} tokens without name words, {} with", plain.len(), named.len());
    print!("{}", named.to_text());
    Ok(())
}
