//! Data ingestion: vocabulary, synthetic tasks, corpus files, batching and
//! mask sampling.

mod batch;
pub mod io;
mod synthetic;
mod vocab;

pub use batch::{
    encode_pairs, make_batches, sample_mask, Batch, BatchConfig, Batches, IdMatrix, SentencePair,
};
pub use synthetic::{
    generate_split, generate_synthetic, toy_grammar_transduce, Category, Task, TextPair, GRAMMAR_RULE_COUNT,
    LEXICON, SYMBOL_ALPHABET,
};
pub use vocab::{
    TokenId, Vocab, EOS, LEN, MASK, NUM_SPECIALS, PAD, SOS, SPECIALS, UNK,
};
