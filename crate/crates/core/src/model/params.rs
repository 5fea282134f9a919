//! Named parameter tensors and their layout.
//!
//! Weight matrices are stored `[out, in]`; a linear layer computes
//! `x @ W^T + b`.

use std::collections::BTreeMap;

use rand::Rng;

use super::config::{LatentKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn get_key_value(&self, name: &str) -> Option<(&String, &Tensor)> {
        self.tensors.get_key_value(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore { tensors }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform with variance 1; embedding tables.
    Embedding,
    /// Glorot uniform from the two extents.
    Glorot,
    Zeros,
    Ones,
}

/// Every parameter of `config` with its shape and initializer, in a stable
/// order.
pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mut out: Vec<(String, Vec<usize>, Init)> = vec![
        ("embed.word".into(), vec![config.vocab_size, d], Init::Embedding),
        ("embed.role".into(), vec![config.num_roles, d], Init::Embedding),
        ("embed.turn".into(), vec![config.max_turns, d], Init::Embedding),
    ];
    let linear = |out: &mut Vec<_>, name: String, o: usize, i: usize| {
        out.push((format!("{name}.weight"), vec![o, i], Init::Glorot));
        out.push((format!("{name}.bias"), vec![o], Init::Zeros));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: String| {
        out.push((format!("{name}.gamma"), vec![d], Init::Ones));
        out.push((format!("{name}.beta"), vec![d], Init::Zeros));
    };
    for (stack, layers) in [("encoder", config.encoder_layers), ("decoder", config.decoder_layers)] {
        for l in 0..layers {
            let mut attn = vec!["self_attn"];
            if stack == "decoder" {
                attn.push("cross_attn");
            }
            for (i, a) in attn.iter().enumerate() {
                for p in ["q", "k", "v", "o"] {
                    linear(&mut out, format!("{stack}.{l}.{a}.{p}"), d, d);
                }
                norm(&mut out, format!("{stack}.{l}.norm{}", i + 1));
            }
            linear(&mut out, format!("{stack}.{l}.ffn.in"), config.d_ff, d);
            linear(&mut out, format!("{stack}.{l}.ffn.out"), d, config.d_ff);
            norm(&mut out, format!("{stack}.{l}.norm{}", attn.len() + 1));
        }
    }
    if config.latents.is_some() {
        linear(&mut out, "fuse".into(), d, config.fusion_width());
    }
    linear(&mut out, "output".into(), config.vocab_size, d);
    for kind in config.active_latents().iter() {
        for (net, extra) in [("prior", 0), ("posterior", 1)] {
            let inputs = (kind.prior_inputs() + extra) * d;
            linear(&mut out, latent_name(net, kind, "hidden"), d, inputs);
            linear(&mut out, latent_name(net, kind, "head"), 2 * config.latent_dim, d);
        }
    }
    out
}

pub(crate) fn latent_name(net: &str, kind: LatentKind, layer: &str) -> String {
    format!("{net}.{}.{layer}", kind.as_str())
}

pub fn init_tensor<R: Rng + ?Sized>(shape: &[usize], init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::Embedding => Tensor::uniform(shape, 3f64.sqrt(), rng),
        Init::Glorot => {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            Tensor::uniform(shape, bound, rng)
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
    }
}

/// Fresh parameters for every entry of the layout.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(config) {
        store.insert(name, init_tensor(&shape, init, rng));
    }
    store
}

/// Checks that `store` holds exactly the tensors of `config`'s layout.
pub fn check_layout(config: &ModelConfig, store: &ParamStore) -> Result<()> {
    let expected = layout(config);
    let mut bad = Vec::new();
    for (name, shape, _) in &expected {
        match store.get(name) {
            None => bad.push(format!("{name} (missing)")),
            Some(t) if t.shape() != shape.as_slice() => {
                bad.push(format!("{name} (shape {:?}, expected {shape:?})", t.shape()))
            }
            Some(t) if !t.is_finite() => bad.push(format!("{name} (non-finite values)")),
            _ => {}
        }
    }
    for name in store.names() {
        if !expected.iter().any(|(n, _, _)| n == name) {
            bad.push(format!("{name} (unexpected)"));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Load { paths: bad })
    }
}
