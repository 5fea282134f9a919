//! Dialogue history sets for one utterance to translate.

use std::fmt;
use std::str::FromStr;

use super::corpus::{Dialogue, Utterance};
use super::vocab::{CLS, SEP};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Direction {
    /// Translate `src` into `tgt`.
    #[default]
    Forward,
    /// Translate `tgt` into `src`.
    Reverse,
}

impl Direction {
    pub fn inverse(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" | "src2tgt" => Ok(Direction::Forward),
            "reverse" | "tgt2src" => Ok(Direction::Reverse),
            other => Err(Error::Config(format!("unknown direction `{other}`"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        })
    }
}

/// One utterance to translate with its reference and dialogue history.
///
/// `c_x`/`c_y` hold the most recent turns in chronological order; `c_role`
/// holds the speaker's own earlier source-language utterances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatExample {
    pub dialogue_id: String,
    pub turn: usize,
    pub x_u: Utterance,
    pub y_u: Utterance,
    pub c_role: Vec<Utterance>,
    pub c_x: Vec<Utterance>,
    pub c_y: Vec<Utterance>,
}

impl ChatExample {
    /// Source plus target token count, without special tokens.
    pub fn token_count(&self) -> usize {
        self.x_u.tokens.len() + self.y_u.tokens.len()
    }
}

fn sides(dialogue: &Dialogue, i: usize, direction: Direction) -> (&Utterance, &Utterance) {
    let t = &dialogue.turns[i];
    match direction {
        Direction::Forward => (&t.source, &t.target),
        Direction::Reverse => (&t.target, &t.source),
    }
}

pub fn build_context_sets(dialogue: &Dialogue, turn: usize, direction: Direction, window: usize) -> Result<ChatExample> {
    if turn >= dialogue.turns.len() {
        return Err(Error::Index {
            what: "dialogue turns",
            index: turn,
            len: dialogue.turns.len(),
        });
    }
    let (x_u, y_u) = sides(dialogue, turn, direction);
    let start = turn - window.min(turn);
    let (c_x, c_y) = (start..turn)
        .map(|i| {
            let (x, y) = sides(dialogue, i, direction);
            (x.clone(), y.clone())
        })
        .unzip();
    let mut c_role: Vec<Utterance> = (0..turn)
        .rev()
        .map(|i| sides(dialogue, i, direction).0)
        .filter(|u| u.role == x_u.role)
        .take(window)
        .cloned()
        .collect();
    c_role.reverse();
    Ok(ChatExample {
        dialogue_id: dialogue.id.clone(),
        turn,
        x_u: x_u.clone(),
        y_u: y_u.clone(),
        c_role,
        c_x,
        c_y,
    })
}

/// One example per turn of `dialogue`.
pub fn dialogue_examples(dialogue: &Dialogue, direction: Direction, window: usize) -> Vec<ChatExample> {
    (0..dialogue.turns.len())
        .map(|t| build_context_sets(dialogue, t, direction, window).expect("turn in range"))
        .collect()
}

/// Per-token ids for one input sequence. Positions are implicit (`0..len`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<usize>,
    pub roles: Vec<usize>,
    pub turns: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn from_utterance(u: &Utterance) -> Self {
        TokenSeq {
            tokens: u.tokens.clone(),
            roles: vec![u.role; u.tokens.len()],
            turns: vec![u.turn; u.tokens.len()],
        }
    }

    fn push(&mut self, token: usize, role: usize, turn: usize) {
        self.tokens.push(token);
        self.roles.push(role);
        self.turns.push(turn);
    }

    /// Keeps the first token and the last `max_len - 1` others.
    pub fn truncate_front(&mut self, max_len: usize) {
        if self.len() <= max_len || max_len == 0 {
            return;
        }
        let cut = self.len() - (max_len - 1);
        for v in [&mut self.tokens, &mut self.roles, &mut self.turns] {
            v.drain(1..cut);
        }
    }
}

/// `[cls] u1 [sep] u2 ...`. The cls token takes the role and turn of the
/// first utterance (0/0 when empty); each sep takes those of the utterance
/// before it.
pub fn serialize_context(utterances: &[Utterance]) -> TokenSeq {
    let mut seq = TokenSeq::default();
    let (role, turn) = utterances.first().map_or((0, 0), |u| (u.role, u.turn));
    seq.push(CLS, role, turn);
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            let prev = &utterances[i - 1];
            seq.push(SEP, prev.role, prev.turn);
        }
        for &t in &u.tokens {
            seq.push(t, u.role, u.turn);
        }
    }
    seq
}
