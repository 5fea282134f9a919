//! Tokenizer and vocabulary, stored either as a prepared data directory or
//! inside checkpoint metadata so a checkpoint is usable on its own.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};

use chatnmt_core::data::{BpeModel, Tokenizer, TokenizerMode, Vocabulary};
use chatnmt_core::kv::{format_kv, read_kv};
use chatnmt_core::Error;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";
pub const TOKENIZER_FILE: &str = "tokenizer.cfg";

const META_TOKENIZER: &str = "tokenizer";
const META_VOCAB: &str = "vocab";
const META_MERGES: &str = "merges";

#[derive(Debug)]
pub struct Assets {
    pub tokenizer: Tokenizer,
    pub vocab: Vocabulary,
}

impl Assets {
    fn tokens(&self) -> Vec<&str> {
        (0..self.vocab.len()).filter_map(|i| self.vocab.token(i)).collect()
    }

    fn merges_text(&self) -> String {
        self.tokenizer
            .bpe
            .merges()
            .iter()
            .map(|(a, b)| format!("{a} {b}\n"))
            .collect()
    }

    pub fn same_as(&self, other: &Assets) -> bool {
        self.tokenizer.mode == other.tokenizer.mode
            && self.tokenizer.bpe.merges() == other.tokenizer.bpe.merges()
            && self.tokens() == other.tokens()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        self.vocab.write(&dir.join(VOCAB_FILE))?;
        if self.tokenizer.mode == TokenizerMode::Bpe {
            self.tokenizer.bpe.write(&dir.join(MERGES_FILE))?;
        }
        let cfg = format_kv(&[("tokenizer", self.tokenizer.mode.to_string())]);
        std::fs::write(dir.join(TOKENIZER_FILE), cfg)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(TOKENIZER_FILE);
        let mut mode = TokenizerMode::default();
        for e in read_kv(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))? {
            match e.key.as_str() {
                "tokenizer" => mode = e.value.parse()?,
                other => {
                    return Err(Error::Parse {
                        path: cfg_path.display().to_string(),
                        line: e.line,
                        msg: format!("unknown key `{other}`"),
                    }
                    .into())
                }
            }
        }
        let bpe = if mode == TokenizerMode::Bpe {
            let path = dir.join(MERGES_FILE);
            BpeModel::read(&path).with_context(|| format!("reading {}", path.display()))?
        } else {
            BpeModel::default()
        };
        let path = dir.join(VOCAB_FILE);
        let vocab = Vocabulary::read(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Assets {
            tokenizer: Tokenizer::new(mode, bpe),
            vocab,
        })
    }

    pub fn to_metadata(&self, meta: &mut BTreeMap<String, String>) {
        meta.insert(META_TOKENIZER.into(), self.tokenizer.mode.to_string());
        meta.insert(META_VOCAB.into(), self.tokens().join("\n"));
        meta.insert(META_MERGES.into(), self.merges_text());
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>, name: &str) -> Result<Self> {
        let get = |key: &str| {
            meta.get(key)
                .ok_or_else(|| Error::Validation(format!("checkpoint {name} carries no `{key}` entry")))
        };
        let mode: TokenizerMode = get(META_TOKENIZER)?.parse()?;
        let vocab = Vocabulary::from_tokens(get(META_VOCAB)?.split('\n').map(str::to_string).collect())?;
        let mut merges = Vec::new();
        for line in get(META_MERGES)?.lines() {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Validation(format!("checkpoint {name}: bad merge {line:?}")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(Assets {
            tokenizer: Tokenizer::new(mode, BpeModel::from_merges(merges)),
            vocab,
        })
    }
}
