//! Translation output lines and their alignment with a reference corpus.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use chatnmt_core::data::{DialogueRecord, Direction};
use chatnmt_core::Error;

fn is_false(b: &bool) -> bool {
    !*b
}

/// One translated turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypRecord {
    pub id: String,
    pub turn: usize,
    pub hyp: String,
    /// Set when decoding hit the length limit before end of sentence.
    #[serde(default, skip_serializing_if = "is_false")]
    pub truncated: bool,
}

/// The side of a turn a system translating in `direction` produces.
pub fn target_text(turn: &chatnmt_core::data::TurnRecord, direction: Direction) -> &str {
    match direction {
        Direction::Forward => &turn.tgt,
        Direction::Reverse => &turn.src,
    }
}

/// Reference texts per dialogue and turn.
pub fn references(corpus: &[DialogueRecord], direction: Direction) -> Vec<Vec<String>> {
    corpus
        .iter()
        .map(|d| d.turns.iter().map(|t| target_text(t, direction).to_string()).collect())
        .collect()
}

/// Hypotheses from `path` arranged like [`references`] of `corpus`.
///
/// `path` holds either translation lines or a corpus in the dialogue format,
/// whose target side is then taken as the hypothesis.
pub fn read_aligned(path: &Path, corpus: &[DialogueRecord], direction: Direction) -> Result<Vec<Vec<String>>> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).with_context(|| format!("opening {name}"))?;
    let mut found: HashMap<(String, usize), String> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: name.clone(),
            line: i + 1,
            msg: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
        let entries: Vec<(String, usize, String)> = if value.get("turns").is_some() {
            let d: DialogueRecord = serde_json::from_value(value).map_err(parse_err)?;
            d.turns
                .iter()
                .enumerate()
                .map(|(t, turn)| (d.id.clone(), t, target_text(turn, direction).to_string()))
                .collect()
        } else {
            let h: HypRecord = serde_json::from_value(value).map_err(parse_err)?;
            vec![(h.id, h.turn, h.hyp)]
        };
        for (id, turn, text) in entries {
            if found.insert((id.clone(), turn), text).is_some() {
                return Err(Error::Validation(format!("{name}: turn {turn} of dialogue {id} appears twice")).into());
            }
        }
    }
    let mut out = Vec::with_capacity(corpus.len());
    for d in corpus {
        let mut turns = Vec::with_capacity(d.turns.len());
        for t in 0..d.turns.len() {
            let text = found.remove(&(d.id.clone(), t)).ok_or_else(|| {
                Error::Validation(format!("{name}: no hypothesis for turn {t} of dialogue {}", d.id))
            })?;
            turns.push(text);
        }
        out.push(turns);
    }
    if let Some((id, turn)) = found.keys().min() {
        return Err(Error::Validation(format!(
            "{name}: turn {turn} of dialogue {id} is not in the reference corpus"
        ))
        .into());
    }
    Ok(out)
}
