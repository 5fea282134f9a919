//! Sentence-level pretraining and latent fine-tuning.

mod config;
mod objective;
mod trainer;

pub use config::TrainConfig;
pub use objective::{kl_anneal, stage1_loss, stage2_objective, LossParts, StepReport};
pub use trainer::{batch_objective, derive_seed, prepare_model, score_corpus, train, CorpusScore, TrainEvent, TrainOutcome};
