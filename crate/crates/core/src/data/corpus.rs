//! Dialogue corpus in JSONL: one dialogue per line,
//! `{"id": str, "turns": [{"src": str, "tgt": str, "role": int}]}`.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bpe::Tokenizer;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub src: String,
    pub tgt: String,
    pub role: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub id: String,
    pub turns: Vec<TurnRecord>,
}

/// Extents of the role and turn embedding tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusLimits {
    pub num_roles: usize,
    pub max_turns: usize,
}

impl Default for CorpusLimits {
    fn default() -> Self {
        CorpusLimits {
            num_roles: 2,
            max_turns: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub role: usize,
    /// Zero-based position of the turn in its dialogue (not clamped).
    pub turn: usize,
    pub side: Side,
}

/// Aligned source/target utterances of one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub source: Utterance,
    pub target: Utterance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

pub fn load_corpus(path: &Path, limits: &CorpusLimits) -> Result<Vec<DialogueRecord>> {
    let file = std::fs::File::open(path)?;
    parse_corpus(file, &path.display().to_string(), limits)
}

pub fn parse_corpus<R: Read>(reader: R, name: &str, limits: &CorpusLimits) -> Result<Vec<DialogueRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        validate(&record, limits)?;
        out.push(record);
    }
    Ok(out)
}

fn validate(record: &DialogueRecord, limits: &CorpusLimits) -> Result<()> {
    for (t, turn) in record.turns.iter().enumerate() {
        if turn.role >= limits.num_roles {
            return Err(Error::validation(format!(
                "dialogue {}: turn {t} has role {} but only {} roles are configured",
                record.id, turn.role, limits.num_roles
            )));
        }
    }
    if record.turns.len() > limits.max_turns {
        log::warn!(
            "dialogue {} has {} turns; turn indices past {} share the last turn embedding",
            record.id,
            record.turns.len(),
            limits.max_turns - 1
        );
    }
    Ok(())
}

pub fn write_corpus(path: &Path, dialogues: &[DialogueRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dialogues {
        serde_json::to_writer(&mut out, d).map_err(std::io::Error::from)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Tokenizes both sides of every turn into vocabulary ids.
pub fn encode_dialogue(record: &DialogueRecord, tokenizer: &Tokenizer, vocab: &Vocabulary) -> Result<Dialogue> {
    let utterance = |text: &str, role, turn, side| {
        let tokens = vocab.encode(&tokenizer.tokenize(text));
        if tokens.is_empty() {
            return Err(Error::validation(format!(
                "dialogue {}: turn {turn} has an empty {side:?} utterance",
                record.id
            )));
        }
        Ok(Utterance {
            tokens,
            role,
            turn,
            side,
        })
    };
    let turns = record
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(Turn {
                source: utterance(&t.src, t.role, i, Side::Source)?,
                target: utterance(&t.tgt, t.role, i, Side::Target)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dialogue {
        id: record.id.clone(),
        turns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LIMITS: CorpusLimits = CorpusLimits {
        num_roles: 2,
        max_turns: 10,
    };

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_corpus("".as_bytes(), "mem", &LIMITS).unwrap().is_empty());
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let text = "{\"id\":\"a\",\"turns\":[]}\n{\"id\": 3}\n";
        match parse_corpus(text.as_bytes(), "mem", &LIMITS) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn role_out_of_range_is_rejected() {
        let text = r#"{"id":"a","turns":[{"src":"x","tgt":"y","role":2}]}"#;
        assert!(matches!(
            parse_corpus(text.as_bytes(), "mem", &LIMITS),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn empty_utterance_is_rejected() {
        let rec = DialogueRecord {
            id: "d".into(),
            turns: vec![TurnRecord {
                src: " ".into(),
                tgt: "y".into(),
                role: 0,
            }],
        };
        let vocab = Vocabulary::build(["y"]);
        assert!(encode_dialogue(&rec, &Tokenizer::whitespace(), &vocab).is_err());
    }
}
