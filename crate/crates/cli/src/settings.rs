//! Model and training settings from defaults, a key=value file and flags.
//!
//! Later sources win: the file overrides defaults (or the initial
//! checkpoint's model settings), `--set` entries override the file, and
//! named flags override everything.

use std::path::Path;

use anyhow::Result;

use chatnmt_core::kv::{format_kv, read_kv};
use chatnmt_core::model::ModelConfig;
use chatnmt_core::train::TrainConfig;
use chatnmt_core::Error;

/// Model settings that may differ from the checkpoint a run continues.
const TUNABLE: [&str; 2] = ["dropout", "label_smoothing"];

#[derive(Clone, Debug)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `vocab_size` if some source named it; it must match the vocabulary.
    pub vocab_size: Option<usize>,
}

/// A setting and where it came from, for error messages.
pub struct Source {
    pub key: String,
    pub value: String,
    pub origin: String,
}

pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn gather(file: Option<&Path>, set: &[(String, String)], flags: Vec<(&str, String)>) -> Result<Vec<Source>> {
    let mut out = Vec::new();
    if let Some(path) = file {
        for e in read_kv(path)? {
            out.push(Source {
                key: e.key,
                value: e.value,
                origin: format!("{}:{}", path.display(), e.line),
            });
        }
    }
    out.extend(set.iter().map(|(k, v)| Source {
        key: k.clone(),
        value: v.clone(),
        origin: "--set".into(),
    }));
    out.extend(flags.into_iter().map(|(k, v)| Source {
        key: k.to_string(),
        value: v,
        origin: format!("--{}", k.replace('_', "-")),
    }));
    Ok(out)
}

/// Applies `sources` over `model`. With `locked`, structural model settings
/// must keep the values they have in `model`.
pub fn resolve(model: ModelConfig, locked: bool, sources: &[Source]) -> Result<Settings> {
    let before = model.to_pairs();
    let mut s = Settings {
        model,
        train: TrainConfig::default(),
        vocab_size: None,
    };
    for src in sources {
        let bad = |msg: String| Error::Config(format!("{} ({}): {msg}", src.key, src.origin));
        match src.key.as_str() {
            "latents" => return Err(bad("set by `stage` and `ablation`, not directly".into()).into()),
            "vocab_size" => {
                s.vocab_size = Some(
                    src.value
                        .parse()
                        .map_err(|_| bad(format!("invalid value {:?}", src.value)))?,
                );
                continue;
            }
            _ => {}
        }
        if s.model.set(&src.key, &src.value)? {
            if locked && !TUNABLE.contains(&src.key.as_str()) {
                let old = before.iter().find(|(k, _)| *k == src.key).map(|(_, v)| v);
                let new = s.model.to_pairs().into_iter().find(|(k, _)| *k == src.key).map(|(_, v)| v);
                if old != new.as_ref() {
                    return Err(bad(format!(
                        "the initial checkpoint has {}; only {} can change when continuing",
                        old.map_or("-", String::as_str),
                        TUNABLE.join(" and ")
                    ))
                    .into());
                }
            }
        } else if !s.train.set(&src.key, &src.value)? {
            return Err(bad("unknown setting".into()).into());
        }
    }
    Ok(s)
}

/// The settings file that reproduces a run.
pub fn resolved_text(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut pairs: Vec<(&str, String)> = model
        .to_pairs()
        .into_iter()
        .filter(|(k, _)| *k != "latents" && *k != "vocab_size")
        .collect();
    pairs.extend(train.to_pairs());
    format!("# chatnmt training settings\n{}", format_kv(&pairs))
}
