//! Tokenization, synthetic corpora, passkey prompts and QA items.

mod corpus;
mod passkey;
mod tokenizer;

pub use corpus::{
    build_synthetic_corpus, entity_name, gen_qa_item, gen_qa_set, CorpusKind, Fact, MarkovChain, QaItem,
    MARKOV_ALPHABET,
};
pub use passkey::{
    answer_text, extract_key, fillers_for_length, gen_passkey_dataset, gen_passkey_text, key_sentence, split_query,
    PasskeySample, PasskeySpec, FILLER, PREAMBLE, QUESTION,
};
pub use tokenizer::{Tokenizer, TokenizerMode};
