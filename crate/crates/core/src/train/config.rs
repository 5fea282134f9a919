use std::str::FromStr;

use crate::data::Direction;
use crate::error::{Error, Result};
use crate::model::LatentSet;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// 1: sentence-level pretraining; 2: latent fine-tuning.
    pub stage: u8,
    pub max_steps: u64,
    /// Padded source+target token budget per batch.
    pub batch_tokens: usize,
    pub anneal_steps: u64,
    /// Latents removed from the stage-2 model.
    pub ablation: LatentSet,
    pub context_window: usize,
    pub direction: Direction,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub lr_scale: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Allow stage 2 without an initial checkpoint.
    pub from_scratch: bool,
    /// Include wall-clock throughput in step reports (makes logs
    /// non-reproducible).
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            max_steps: 2000,
            batch_tokens: 4096,
            anneal_steps: 10000,
            ablation: LatentSet::NONE,
            context_window: 3,
            direction: Direction::Forward,
            seed: 1,
            checkpoint_every: 0,
            log_every: 10,
            lr_scale: 1.0,
            warmup_steps: 4000,
            clip_norm: 5.0,
            from_scratch: false,
            log_timing: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.anneal_steps == 0 {
            return Err(Error::Config("anneal_steps must be positive".into()));
        }
        if self.batch_tokens == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_tokens and log_every must be positive".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.lr_scale > 0.0) {
            return Err(Error::Config("clip_norm and lr_scale must be positive".into()));
        }
        Ok(())
    }

    /// The latents a stage-2 model carries under this ablation.
    pub fn active_latents(&self) -> LatentSet {
        self.ablation.complement()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "stage" => self.stage = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "batch_tokens" => self.batch_tokens = parse(key, value)?,
            "anneal_steps" => self.anneal_steps = parse(key, value)?,
            "ablation" => self.ablation = parse(key, value)?,
            "context_window" => self.context_window = parse(key, value)?,
            "direction" => self.direction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "from_scratch" => self.from_scratch = parse(key, value)?,
            "log_timing" => self.log_timing = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage", self.stage.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("batch_tokens", self.batch_tokens.to_string()),
            ("anneal_steps", self.anneal_steps.to_string()),
            ("ablation", self.ablation.to_string()),
            ("context_window", self.context_window.to_string()),
            ("direction", self.direction.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("lr_scale", self.lr_scale.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("from_scratch", self.from_scratch.to_string()),
            ("log_timing", self.log_timing.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip() {
        let c = TrainConfig {
            stage: 2,
            ablation: "dia,tra".parse().unwrap(),
            direction: Direction::Reverse,
            lr_scale: 0.7,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(back.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, c);
        assert_eq!(c.active_latents().to_string(), "role");
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { stage: 3, ..TrainConfig::default() },
            TrainConfig { anneal_steps: 0, ..TrainConfig::default() },
            TrainConfig { clip_norm: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert!(TrainConfig::default().set("stage", "two").is_err());
    }
}
