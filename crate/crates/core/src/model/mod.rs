//! Transformer encoder/decoder with context encoding and latent fusion.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{LatentKind, LatentSet, ModelConfig};
pub use params::{check_layout, init_params, layout, Init, ParamStore};
pub use transformer::{AttentionRecord, Forward};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed sinusoidal position table, `[positions, d]`.
pub fn sinusoidal_table(positions: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; positions * d];
    for pos in 0..positions {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[positions, d], data).expect("positive extents")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    positions: Tensor,
}

impl Model {
    /// Freshly initialized parameters drawn from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng);
        Ok(Self::assemble(config, params))
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        check_layout(&config, &params)?;
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: ParamStore) -> Self {
        let positions = sinusoidal_table(config.max_positions, config.d_model);
        Model {
            config,
            params,
            positions,
        }
    }

    pub fn positional_table(&self) -> &Tensor {
        &self.positions
    }

    /// Replaces the fixed position table (same shape required).
    pub fn set_positional_table(&mut self, table: Tensor) -> Result<()> {
        if table.shape() != self.positions.shape() {
            return Err(Error::shape("positional table", table.shape(), self.positions.shape()));
        }
        self.positions = table;
        Ok(())
    }

    /// A model wired to `latents` that keeps every parameter this one
    /// shares with it; the fusion layer and latent networks are fresh.
    pub fn with_latents(&self, latents: LatentSet, seed: u64) -> Result<Model> {
        let config = ModelConfig {
            latents: Some(latents),
            ..self.config.clone()
        };
        let mut model = Model::new(config, seed)?;
        for (name, t) in self.params.iter() {
            if name.starts_with("fuse.") {
                continue;
            }
            match model.params.get_mut(name) {
                Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                Some(slot) => {
                    return Err(Error::Load {
                        paths: vec![format!("{name} (shape {:?}, expected {:?})", t.shape(), slot.shape())],
                    })
                }
                None => {}
            }
        }
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_values() {
        let pe = sinusoidal_table(4, 6);
        assert_eq!(pe.row(0), [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let expected = (1.0f64 / 10000f64.powf(2.0 / 6.0)).sin();
        assert!((pe.row(1)[2] - expected).abs() < 1e-15);
        assert!((pe.row(3)[1] - 3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn second_stage_keeps_shared_weights() {
        let base = ModelConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            latent_dim: 4,
            vocab_size: 11,
            latents: None,
            ..ModelConfig::default()
        };
        let m1 = Model::new(base, 1).unwrap();
        let m2 = m1.with_latents(LatentSet::ALL, 2).unwrap();
        for (name, t) in m1.params.iter() {
            assert_eq!(m2.params.get(name), Some(t), "{name}");
        }
        assert!(m2.params.contains("fuse.weight"));
        assert!(m2.params.contains("posterior.tra.head.bias"));
        check_layout(&m2.config, &m2.params).unwrap();
    }
}
