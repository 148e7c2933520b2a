//! Toy-scale corpus handling: word-level vocabulary, seeded synthetic text,
//! masked-token example construction and batching. All randomness flows from
//! explicit seeds.

mod corpus;
mod examples;
mod vocab;

pub use corpus::{generate_synthetic_corpus, parse_documents};
pub use examples::{
    batch_iterator, make_examples, split_examples, Batch, MaskingParams, PaddedExample,
    TrainingExample,
};
pub use vocab::{Vocab, CLS_ID, MASK_ID, PAD_ID, RESERVED_TOKENS, SEP_ID, UNK_ID};
