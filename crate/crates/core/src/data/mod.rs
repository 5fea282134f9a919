//! Dialogue corpora, subword tokenization, history sets and padded batches.

pub mod batch;
pub mod bpe;
pub mod context;
pub mod corpus;
pub mod synthetic;
pub mod vocab;

pub use batch::{make_batch, make_batches, make_source_batch, plan_batches, Batch, BatchLimits, SeqBatch, SourceBatch};
pub use bpe::{detokenize, train_bpe, BpeModel, Tokenizer, TokenizerMode};
pub use context::{build_context_sets, dialogue_examples, serialize_context, ChatExample, Direction, TokenSeq};
pub use corpus::{
    encode_dialogue, load_corpus, parse_corpus, write_corpus, CorpusLimits, Dialogue, DialogueRecord, Side, Turn,
    TurnRecord, Utterance,
};
pub use vocab::Vocabulary;
