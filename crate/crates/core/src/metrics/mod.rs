//! Corpus BLEU, TER and embedding-based dialogue coherence.

mod bleu;
mod coherence;
mod ter;

pub use bleu::{
    bleu, bleu_from_stats, bleu_tokens, ngram_stats, paired_bootstrap, tokenize_13a, BleuConfig, BleuScore,
    BleuTokenize,
};
pub use coherence::{coherence, coherence_report, DepthRow, WordVectors};
pub use ter::{corpus_ter, edit_distance, ter, ter_tokens, TerConfig, TerStats};
