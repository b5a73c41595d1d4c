//! Source-prompted language-model pre-training at desk scale.
//!
//! The crate covers the full pipeline: multi-source corpora with named
//! sources, a vocabulary with one reserved token per source, tiny
//! encoder-only / encoder-decoder / decoder-only transformers trained
//! with a small reverse-mode autodiff engine, source-prompt injection with
//! masked source prediction, fine-tuning with none/manual/auto/random
//! source assignment, evaluation, and checkpointing.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod finetune;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod persist;
pub mod pretrain;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
