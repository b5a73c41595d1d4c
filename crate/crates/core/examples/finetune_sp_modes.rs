//! Fine-tunes one pre-trained model on a source-flavoured classification
//! task with each way of choosing the prompt, and compares test scores.
//!
//! `cargo run --release --example finetune_sp_modes`

use splm::corpus::{generate_split, SyntheticSpec};
use splm::finetune::{finetune, prepare_task, FinetuneConfig, ModelPredictor, SpAssignment, TaskDataset};
use splm::model::{Architecture, ModelConfig, ModelState};
use splm::pretrain::{pretrain, Placement, PretrainConfig, Prompter, SpTokenMode};
use splm::tokenizer::{VocabOptions, Vocabulary};

fn main() -> splm::Result<()> {
    let spec = SyntheticSpec::shared(4, 16, 32, 200, 0.5, 3)
        .with_heldout(40)
        .with_names(&["WIKI", "BOOK", "NEWS", "WEB"]);
    let (train, heldout) = generate_split(&spec, 1)?;
    let vocab = Vocabulary::build(&train, &VocabOptions::default())?;

    let mut cfg = ModelConfig::new(Architecture::EncoderOnly, vocab.len());
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_ff = 128;
    cfg.max_seq_len = 34;
    let mut model = ModelState::init(cfg, 0)?;
    let pc = PretrainConfig {
        steps: 300,
        batch_size: 16,
        sp_mask_prob: 0.3,
        ..Default::default()
    };
    pretrain(&mut model, &vocab, &train, &pc)?;

    // Label = which half of the sources a document came from.
    let task = TaskDataset::from_sources(&heldout, &["first", "first", "second", "second"], 0.25)?;
    let prompter = Prompter::new(&vocab, Placement::Start, SpTokenMode::Reserved)?;
    let predictor = ModelPredictor {
        model: &model,
        vocab: &vocab,
        batch_size: 32,
    };
    let ft = FinetuneConfig {
        epochs: 3,
        ..Default::default()
    };
    for mode in [
        SpAssignment::None,
        SpAssignment::Manual("WIKI".into()),
        SpAssignment::Auto,
        SpAssignment::Random(5),
    ] {
        let data = prepare_task(&task, &model, &vocab, &prompter, &mode, &train.names(), Some(&predictor), &ft)?;
        let (_, report) = finetune(&model, &vocab, &data, &ft)?;
        let test = report.test.expect("task has a test split");
        let best = report.best_epoch.map_or("-".to_string(), |e| e.to_string());
        println!("{:>12}: best epoch {best}, test {} {:.3}", mode.to_string(), test.name, test.value);
    }
    Ok(())
}
