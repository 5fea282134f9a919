use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::latent::{draw_noise, kl_divergence, posterior_forward, prior_forward, sample, Conditioning};
use crate::model::{Forward, LatentKind};
use crate::tensor::Var;

/// KL weight after `step` updates: `min(1, step / anneal_steps)`.
pub fn kl_anneal(step: u64, anneal_steps: u64) -> f64 {
    if anneal_steps == 0 {
        return 1.0;
    }
    (step as f64 / anneal_steps as f64).min(1.0)
}

/// The scalar objective of one batch together with its parts.
#[derive(Clone, Debug)]
pub struct LossParts {
    /// `(CE + lambda * sum KL) / tokens`.
    pub loss: Var,
    /// Label-smoothed cross-entropy summed over target tokens.
    pub ce_sum: f64,
    /// Plain negative log-likelihood summed over target tokens.
    pub nll_sum: f64,
    pub tokens: usize,
    /// KL summed over the batch, one entry per active latent.
    pub kl: Vec<(LatentKind, f64)>,
    /// Input width of the fusion projection, when the model has one.
    pub fusion_width: Option<usize>,
}

impl LossParts {
    pub fn ce_per_token(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }

    pub fn kl_per_word(&self) -> f64 {
        self.kl.iter().fold(0.0, |acc, (_, v)| acc + v) / self.tokens as f64
    }
}

fn reconstruction(f: &mut Forward, batch: &Batch, logp: Var) -> Result<(Var, f64, f64)> {
    let eps = f.model().config.label_smoothing;
    let weights = &batch.decoder_input.mask;
    let ce = f.graph.smoothed_nll(logp, &batch.decoder_target, weights, eps)?;
    let ce_sum = f.graph.value(ce).item()?;
    let v = f.model().config.vocab_size;
    let lp = f.graph.value(logp).data();
    let nll_sum = batch
        .decoder_target
        .iter()
        .zip(weights)
        .enumerate()
        .filter(|(_, (_, &w))| w != 0.0)
        .map(|(r, (&t, &w))| -w * lp[r * v + t])
        .sum();
    Ok((ce, ce_sum, nll_sum))
}

fn target_tokens(batch: &Batch) -> Result<usize> {
    match batch.target_tokens() {
        0 => Err(Error::contract("batch has no target tokens")),
        n => Ok(n),
    }
}

/// Sentence-level cross-entropy, averaged per target token. The model must
/// have no fusion layer.
pub fn stage1_loss(f: &mut Forward, batch: &Batch) -> Result<LossParts> {
    if f.model().config.latents.is_some() {
        return Err(Error::contract("sentence-level loss needs a model without latent fusion"));
    }
    let tokens = target_tokens(batch)?;
    let h_enc = f.encode(&batch.source)?;
    let h = f.decode(&batch.decoder_input, h_enc, &batch.source.mask)?;
    let logp = f.log_probs(h)?;
    let (ce, ce_sum, nll_sum) = reconstruction(f, batch, logp)?;
    let loss = f.graph.scale(ce, 1.0 / tokens as f64);
    Ok(LossParts {
        loss,
        ce_sum,
        nll_sum,
        tokens,
        kl: Vec::new(),
        fusion_width: None,
    })
}

/// Reconstruction through posterior samples plus `lambda` times the KL of
/// every active latent, averaged per target token.
pub fn stage2_objective<R: Rng + ?Sized>(f: &mut Forward, batch: &Batch, lambda: f64, noise: &mut R) -> Result<LossParts> {
    let latents = f
        .model()
        .config
        .latents
        .ok_or_else(|| Error::contract("stage-2 objective needs a model with a fusion layer"))?;
    let tokens = target_tokens(batch)?;
    let cond = Conditioning::encode(f, &batch.source, &batch.ctx_role, &batch.ctx_x, &batch.ctx_y, latents)?;
    let mut zs = Vec::new();
    let mut kls = Vec::new();
    let mut kl_vars = Vec::new();
    if !latents.is_empty() {
        let h_tgt = f.encode(&batch.target)?;
        let h_y = f.pool(h_tgt, &batch.target.mask)?;
        for kind in latents.iter() {
            let reps = cond.reps(kind)?;
            let prior = prior_forward(f, kind, &reps)?;
            let post = posterior_forward(f, kind, &reps, h_y)?;
            let eps = draw_noise(&f.graph, post, noise);
            zs.push(sample(&mut f.graph, post, eps)?);
            let kl = kl_divergence(&mut f.graph, post, prior)?;
            kls.push((kind, f.graph.value(kl).item()?));
            kl_vars.push(kl);
        }
    }
    let h = f.decode(&batch.decoder_input, cond.h_enc, &batch.source.mask)?;
    let o = f.fuse(h, &zs)?;
    let logp = f.log_probs(o)?;
    let (ce, ce_sum, nll_sum) = reconstruction(f, batch, logp)?;
    let mut total = ce;
    for kl in kl_vars {
        let weighted = f.graph.scale(kl, lambda);
        total = f.graph.add(total, weighted)?;
    }
    let loss = f.graph.scale(total, 1.0 / tokens as f64);
    Ok(LossParts {
        loss,
        ce_sum,
        nll_sum,
        tokens,
        kl: kls,
        fusion_width: Some(f.model().config.fusion_width()),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    /// Unsmoothed cross-entropy per target token.
    pub ce: f64,
    /// KL per target token for each active latent.
    pub kl: BTreeMap<LatentKind, f64>,
    pub kl_total: f64,
    pub lambda: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tokens_per_sec: Option<f64>,
}
