//! Data model: vocabulary, tokenization, JSONL datasets, and the synthetic
//! contrastive-dataset generator.

mod data;
mod synth;
mod vocab;

pub use data::{load_dataset, write_dataset, ContrastiveInstance, Document};
pub use synth::{generate_synthetic, SyntheticSpec, TEMPLATE_WORDS};
pub use vocab::{
    split_words, TokenId, Vocabulary, EOS, FIRST_REGULAR, PAD, SEP, UNK,
};
