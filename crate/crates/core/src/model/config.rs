use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three latent variables, in the order they are concatenated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    Role,
    Dia,
    Tra,
}

impl LatentKind {
    pub const ALL: [LatentKind; 3] = [LatentKind::Role, LatentKind::Dia, LatentKind::Tra];

    pub fn as_str(self) -> &'static str {
        match self {
            LatentKind::Role => "role",
            LatentKind::Dia => "dia",
            LatentKind::Tra => "tra",
        }
    }

    /// Number of d-dimensional vectors the prior conditions on; the
    /// posterior takes one more (the pooled reference).
    pub fn prior_inputs(self) -> usize {
        match self {
            LatentKind::Role | LatentKind::Dia => 2,
            LatentKind::Tra => 3,
        }
    }
}

impl fmt::Display for LatentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LatentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "role" => Ok(LatentKind::Role),
            "dia" => Ok(LatentKind::Dia),
            "tra" => Ok(LatentKind::Tra),
            other => Err(Error::Config(format!("unknown latent `{other}` (expected role, dia or tra)"))),
        }
    }
}

/// A subset of the latent variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct LatentSet {
    bits: u8,
}

impl LatentSet {
    pub const NONE: LatentSet = LatentSet { bits: 0 };
    pub const ALL: LatentSet = LatentSet { bits: 0b111 };

    fn bit(kind: LatentKind) -> u8 {
        1 << kind as u8
    }

    pub fn contains(self, kind: LatentKind) -> bool {
        self.bits & Self::bit(kind) != 0
    }

    pub fn with(mut self, kind: LatentKind) -> Self {
        self.bits |= Self::bit(kind);
        self
    }

    pub fn complement(self) -> Self {
        LatentSet {
            bits: !self.bits & 0b111,
        }
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    /// Members in canonical order (role, dia, tra).
    pub fn iter(self) -> impl Iterator<Item = LatentKind> {
        LatentKind::ALL.into_iter().filter(move |&k| self.contains(k))
    }

    /// All eight subsets.
    pub fn all_subsets() -> impl Iterator<Item = LatentSet> {
        (0..8u8).map(|bits| LatentSet { bits })
    }
}

impl FromIterator<LatentKind> for LatentSet {
    fn from_iter<I: IntoIterator<Item = LatentKind>>(iter: I) -> Self {
        iter.into_iter().fold(LatentSet::NONE, LatentSet::with)
    }
}

impl FromStr for LatentSet {
    type Err = Error;

    /// Comma-separated kinds; `none`/empty and `all` are accepted.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "" | "none" => Ok(LatentSet::NONE),
            "all" => Ok(LatentSet::ALL),
            list => list.split(',').map(str::parse).collect(),
        }
    }
}

impl fmt::Display for LatentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.iter().map(LatentKind::as_str).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub num_roles: usize,
    pub max_turns: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// `None` for the sentence-level model (no latent fusion layer);
    /// otherwise the latents wired into the fusion projection.
    pub latents: Option<LatentSet>,
}

impl Default for ModelConfig {
    /// Transformer-Base sizes with a 32-dimensional latent space.
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            latent_dim: 32,
            vocab_size: 32000,
            num_roles: 2,
            max_turns: 10,
            max_positions: 256,
            dropout: 0.1,
            label_smoothing: 0.1,
            latents: Some(LatentSet::ALL),
        }
    }
}


fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

impl ModelConfig {
    /// Transformer-Big sizes.
    pub fn big() -> Self {
        ModelConfig {
            d_model: 1024,
            d_ff: 4096,
            heads: 16,
            dropout: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("latent_dim", self.latent_dim),
            ("vocab_size", self.vocab_size),
            ("num_roles", self.num_roles),
            ("max_turns", self.max_turns),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn active_latents(&self) -> LatentSet {
        self.latents.unwrap_or(LatentSet::NONE)
    }

    /// Input width of the fusion projection.
    pub fn fusion_width(&self) -> usize {
        self.d_model + self.active_latents().len() * self.latent_dim
    }

    /// Sets one field from its textual key; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "num_roles" => self.num_roles = parse(key, value)?,
            "max_turns" => self.max_turns = parse(key, value)?,
            "max_positions" => self.max_positions = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "latents" => {
                self.latents = match value.trim() {
                    "sentence" => None,
                    other => Some(other.parse()?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("heads", self.heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("num_roles", self.num_roles.to_string()),
            ("max_turns", self.max_turns.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("dropout", self.dropout.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            (
                "latents",
                self.latents.map_or("sentence".to_string(), |s| s.to_string()),
            ),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_set_parsing() {
        let s: LatentSet = "role,tra".parse().unwrap();
        assert_eq!(s.iter().collect::<Vec<_>>(), [LatentKind::Role, LatentKind::Tra]);
        assert_eq!(s.to_string(), "role,tra");
        assert_eq!("all".parse::<LatentSet>().unwrap(), LatentSet::ALL);
        assert_eq!("none".parse::<LatentSet>().unwrap().len(), 0);
        assert!("role,foo".parse::<LatentSet>().is_err());
        assert_eq!(s.complement().iter().collect::<Vec<_>>(), [LatentKind::Dia]);
        assert_eq!(LatentSet::all_subsets().count(), 8);
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = ModelConfig {
            latents: Some("dia".parse().unwrap()),
            dropout: 0.25,
            ..ModelConfig::default()
        };
        let mut back = ModelConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, c);
        c.latents = None;
        for (k, v) in c.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back.latents, None);
        assert!(!back.set("bogus", "1").unwrap());
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::big().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fusion_width_tracks_active_latents() {
        let c = ModelConfig::default();
        assert_eq!(c.fusion_width(), 512 + 3 * 32);
        for s in LatentSet::all_subsets() {
            let c = ModelConfig {
                latents: Some(s),
                ..ModelConfig::default()
            };
            assert_eq!(c.fusion_width(), 512 + (3 - s.complement().len()) * 32);
        }
    }
}
