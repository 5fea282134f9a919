use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::beam::{BeamConfig, Hypothesis};
use super::translate_example;
use crate::data::{build_context_sets, Dialogue, Direction, Side, Turn};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::derive_seed;

/// Where the target-side history of each turn comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReplayMode {
    /// Reference translations of earlier turns.
    #[default]
    Gold,
    /// This run's own translations of earlier turns.
    SelfTranslate,
    /// Reference targets of earlier turns, with their source side replaced by
    /// the inverse model's translations of those targets.
    BackTranslate,
}

impl FromStr for ReplayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(ReplayMode::Gold),
            "self" => Ok(ReplayMode::SelfTranslate),
            "back" | "back-translate" => Ok(ReplayMode::BackTranslate),
            other => Err(Error::Config(format!("unknown replay mode `{other}` (expected gold, self or back)"))),
        }
    }
}

impl fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayMode::Gold => "gold",
            ReplayMode::SelfTranslate => "self",
            ReplayMode::BackTranslate => "back",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnTranslation {
    pub turn: usize,
    pub hypothesis: Hypothesis,
}

const SALT_LATENT: u64 = 5;
const SALT_BACK: u64 = 6;

/// `dialogue` seen from `direction`: sources become what is translated.
fn oriented(dialogue: &Dialogue, direction: Direction) -> Dialogue {
    match direction {
        Direction::Forward => dialogue.clone(),
        Direction::Reverse => Dialogue {
            id: dialogue.id.clone(),
            turns: dialogue
                .turns
                .iter()
                .map(|t| Turn {
                    source: t.target.clone(),
                    target: t.source.clone(),
                })
                .collect(),
        },
    }
}

/// Translates every turn of `dialogue` in order. `inverse` translates in the
/// opposite direction and is required by [`ReplayMode::BackTranslate`].
pub fn replay_dialogue(
    model: &Model,
    dialogue: &Dialogue,
    direction: Direction,
    mode: ReplayMode,
    inverse: Option<&Model>,
    window: usize,
    cfg: &BeamConfig,
) -> Result<Vec<TurnTranslation>> {
    cfg.validate()?;
    let gold = oriented(dialogue, direction);
    let mut history = gold.clone();
    if mode == ReplayMode::BackTranslate {
        let inverse = inverse.ok_or_else(|| Error::Config("back-translate replay needs an inverse model".into()))?;
        if inverse.config.vocab_size != model.config.vocab_size {
            return Err(Error::Config(format!(
                "inverse model vocabulary ({}) differs from the model's ({})",
                inverse.config.vocab_size, model.config.vocab_size
            )));
        }
        // The last turn's source never serves as context.
        for i in 0..gold.turns.len().saturating_sub(1) {
            let ex = build_context_sets(&gold, i, Direction::Reverse, window)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64, SALT_BACK));
            let hyp = translate_example(inverse, &ex, cfg, &mut rng)?;
            let source = &mut history.turns[i].source;
            source.tokens = hyp.tokens;
            source.side = Side::Source;
        }
    }
    let mut out = Vec::with_capacity(gold.turns.len());
    for t in 0..gold.turns.len() {
        let mut ex = build_context_sets(&history, t, Direction::Forward, window)?;
        ex.x_u = gold.turns[t].source.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, t as u64, SALT_LATENT));
        let hypothesis = translate_example(model, &ex, cfg, &mut rng)?;
        if mode == ReplayMode::SelfTranslate {
            history.turns[t].target.tokens = hypothesis.tokens.clone();
        }
        out.push(TurnTranslation { turn: t, hypothesis });
    }
    Ok(out)
}
