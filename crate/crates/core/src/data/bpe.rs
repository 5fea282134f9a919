//! Joint byte-pair encoding and the subword tokenizer built on it.
//!
//! Subwords that do not end a word carry the [`CONTINUATION`] suffix in the
//! token stream, so [`detokenize`] can restore the original spacing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CONTINUATION: &str = "@@";

#[derive(Clone, Debug, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        BpeModel { merges, ranks }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Splits one word into characters, then applies merges in priority order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            symbols = merge_pair(&symbols, left, right);
        }
        symbols
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut merges = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        msg: format!("expected `left right`, got {line:?}"),
                    })
                }
            }
        }
        Ok(Self::from_merges(merges))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `merges` merge operations from whitespace-separated text.
///
/// Each step merges the most frequent adjacent symbol pair; ties go to the
/// lexicographically smallest pair. Training stops early once no word has
/// two symbols left.
pub fn train_bpe<'a>(corpus: impl IntoIterator<Item = &'a str>, merges: usize) -> Result<BpeModel> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Config("cannot train BPE on an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, usize)> = counts
        .into_iter()
        .map(|(w, c)| (w.chars().map(String::from).collect(), c))
        .collect();
    let mut learned = Vec::with_capacity(merges);
    for _ in 0..merges {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, c) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let mut best: Option<((&str, &str), usize)> = None;
        for (pair, c) in pairs {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        for (symbols, _) in &mut words {
            *symbols = merge_pair(symbols, &a, &b);
        }
        learned.push((a, b));
    }
    Ok(BpeModel::from_merges(learned))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TokenizerMode {
    /// Whole whitespace-separated words.
    #[default]
    Whitespace,
    /// One token per character; for scripts written without spaces.
    Character,
    Bpe,
}

impl FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" | "word" => Ok(Self::Whitespace),
            "char" | "character" => Ok(Self::Character),
            "bpe" => Ok(Self::Bpe),
            other => Err(Error::Config(format!("unknown tokenizer mode `{other}`"))),
        }
    }
}

impl fmt::Display for TokenizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Whitespace => "whitespace",
            Self::Character => "char",
            Self::Bpe => "bpe",
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tokenizer {
    pub mode: TokenizerMode,
    pub bpe: BpeModel,
}

impl Tokenizer {
    pub fn new(mode: TokenizerMode, bpe: BpeModel) -> Self {
        Tokenizer { mode, bpe }
    }

    pub fn whitespace() -> Self {
        Self::default()
    }

    /// Token strings with continuation markers on word-internal pieces.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let pieces = match self.mode {
                TokenizerMode::Whitespace => vec![word.to_string()],
                TokenizerMode::Character => word.chars().map(String::from).collect(),
                TokenizerMode::Bpe => self.bpe.segment_word(word),
            };
            let last = pieces.len() - 1;
            out.extend(pieces.into_iter().enumerate().map(|(i, p)| {
                if i < last {
                    format!("{p}{CONTINUATION}")
                } else {
                    p
                }
            }));
        }
        out
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue = true;
    for t in tokens {
        let t = t.as_ref();
        if !glue {
            out.push(' ');
        }
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_merges_whitespace_mode() {
        let bpe = train_bpe(["a b"], 0).unwrap();
        assert!(bpe.merges().is_empty());
        assert_eq!(Tokenizer::new(TokenizerMode::Whitespace, bpe).tokenize("a b"), ["a", "b"]);
    }

    #[test]
    fn single_merge_takes_most_frequent_pair() {
        let bpe = train_bpe(["abab abab"], 1).unwrap();
        assert_eq!(bpe.merges(), [("a".to_string(), "b".to_string())]);
        assert_eq!(bpe.segment_word("abab"), ["ab", "ab"]);
        let tok = Tokenizer::new(TokenizerMode::Bpe, bpe);
        assert_eq!(tok.tokenize("abab"), ["ab@@", "ab"]);
    }

    #[test]
    fn merges_compose() {
        let bpe = train_bpe(["low lower lowest low"], 3).unwrap();
        assert_eq!(bpe.merges()[0], ("l".to_string(), "o".to_string()));
        assert_eq!(bpe.merges()[1], ("lo".to_string(), "w".to_string()));
        assert_eq!(bpe.segment_word("low"), ["low"]);
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        assert!(matches!(train_bpe(["  "], 3), Err(Error::Config(_))));
    }

    #[test]
    fn merges_file_round_trips() {
        let bpe = train_bpe(["hello world hello there"], 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merges.txt");
        bpe.write(&path).unwrap();
        assert_eq!(BpeModel::read(&path).unwrap().merges(), bpe.merges());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in proptest::collection::vec("[a-e]{1,6}", 1..8), merges in 0usize..12) {
            let text = words.join(" ");
            let bpe = train_bpe(["abcab deabc aabb cde", text.as_str()], merges).unwrap();
            for mode in [TokenizerMode::Whitespace, TokenizerMode::Character, TokenizerMode::Bpe] {
                let tok = Tokenizer::new(mode, bpe.clone());
                prop_assert_eq!(detokenize(&tok.tokenize(&text)), text.clone());
            }
        }
    }
}
