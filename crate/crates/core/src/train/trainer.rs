use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::objective::{kl_anneal, stage1_loss, stage2_objective, LossParts, StepReport};
use crate::data::{make_batches, Batch, BatchLimits, ChatExample};
use crate::error::{Error, Result};
use crate::model::{Forward, LatentKind, LatentSet, Model, ModelConfig};
use crate::tensor::{clip_global_norm, Adam, AdamConfig, InverseSqrtSchedule};

/// Seed for one purpose (`salt`) at one step of a run.
pub fn derive_seed(seed: u64, step: u64, salt: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_SHUFFLE: u64 = 1;
const SALT_DROPOUT: u64 = 2;
const SALT_NOISE: u64 = 3;
const SALT_INIT: u64 = 4;

/// Whether a stage-2 run under `cfg` still needs any latent machinery.
fn sentence_level_fallback(cfg: &TrainConfig) -> bool {
    cfg.stage == 2 && cfg.active_latents().is_empty() && cfg.context_window == 0
}

/// The model a run starts from.
///
/// Stage 1 uses `initial` or fresh weights without a fusion layer. Stage 2
/// extends a sentence-level `initial` with fresh latent networks, continues a
/// compatible stage-2 `initial`, or starts from scratch when allowed.
pub fn prepare_model(initial: Option<Model>, config: &ModelConfig, cfg: &TrainConfig) -> Result<Model> {
    cfg.validate()?;
    let init_seed = derive_seed(cfg.seed, 0, SALT_INIT);
    let wanted = match cfg.stage {
        1 => None,
        _ if sentence_level_fallback(cfg) => {
            log::warn!("all latents ablated and contexts disabled; training the sentence-level objective");
            None
        }
        _ => Some(cfg.active_latents()),
    };
    let fresh = |latents: Option<LatentSet>| {
        let c = ModelConfig {
            latents,
            ..config.clone()
        };
        Model::new(c, init_seed)
    };
    match (initial, wanted) {
        (None, None) if cfg.stage == 1 => fresh(None),
        (None, wanted) => {
            if !cfg.from_scratch {
                return Err(Error::Config(
                    "stage 2 needs an initial checkpoint (or from_scratch = true)".into(),
                ));
            }
            fresh(wanted)
        }
        (Some(m), None) => match m.config.latents {
            None => Ok(m),
            Some(_) => Err(Error::Config(
                "a sentence-level run cannot start from a checkpoint with latent networks".into(),
            )),
        },
        (Some(m), Some(set)) => match m.config.latents {
            None => m.with_latents(set, init_seed),
            Some(have) if have == set => Ok(m),
            Some(have) => Err(Error::Config(format!(
                "checkpoint carries latents `{have}` but the run asks for `{set}`"
            ))),
        },
    }
}

/// Events emitted while training.
pub enum TrainEvent<'a> {
    Step(&'a StepReport),
    Checkpoint { step: u64, model: &'a Model },
}

pub struct TrainOutcome {
    pub model: Model,
    pub steps: u64,
    pub last: Option<StepReport>,
}

/// Computes the objective for one batch on a freshly built tape.
pub fn batch_objective<'m>(
    model: &'m Model,
    batch: &Batch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(Forward<'m>, LossParts, f64)> {
    let mut f = Forward::train(model, derive_seed(cfg.seed, step, SALT_DROPOUT));
    let lambda = kl_anneal(step.saturating_sub(1), cfg.anneal_steps);
    let parts = match model.config.latents {
        None => stage1_loss(&mut f, batch)?,
        Some(_) => {
            let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step, SALT_NOISE));
            stage2_objective(&mut f, batch, lambda, &mut noise)?
        }
    };
    Ok((f, parts, lambda))
}

/// Objective terms averaged over a whole example set.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusScore {
    /// Unsmoothed cross-entropy per target token.
    pub ce: f64,
    /// KL per target token for each active latent.
    pub kl: BTreeMap<LatentKind, f64>,
    pub kl_total: f64,
    pub tokens: usize,
}

/// Scores `examples` without dropout; latents are sampled from the posterior
/// with noise derived from `cfg.seed`.
pub fn score_corpus(model: &Model, examples: &[ChatExample], cfg: &TrainConfig) -> Result<CorpusScore> {
    let limits = BatchLimits {
        max_turns: model.config.max_turns,
        max_positions: model.config.max_positions,
    };
    let batches = make_batches(examples, cfg.batch_tokens, derive_seed(cfg.seed, 0, SALT_SHUFFLE), &limits)?;
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut kl: BTreeMap<LatentKind, f64> = BTreeMap::new();
    for (i, batch) in batches.iter().enumerate() {
        let mut f = Forward::eval(model);
        let parts = match model.config.latents {
            None => stage1_loss(&mut f, batch)?,
            Some(_) => {
                let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64, SALT_NOISE));
                stage2_objective(&mut f, batch, 1.0, &mut noise)?
            }
        };
        nll += parts.nll_sum;
        tokens += parts.tokens;
        for (k, v) in parts.kl {
            *kl.entry(k).or_insert(0.0) += v;
        }
    }
    if tokens == 0 {
        return Err(Error::validation("no examples to score"));
    }
    let n = tokens as f64;
    let kl: BTreeMap<LatentKind, f64> = kl.into_iter().map(|(k, v)| (k, v / n)).collect();
    Ok(CorpusScore {
        ce: nll / n,
        kl_total: kl.values().fold(0.0, |a, b| a + b),
        kl,
        tokens,
    })
}

/// Runs `cfg.max_steps` optimizer updates over `examples`, reshuffling each
/// epoch. Deterministic for a fixed seed.
pub fn train(
    mut model: Model,
    examples: &[ChatExample],
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.max_steps > 0 && examples.is_empty() {
        return Err(Error::validation("no training examples"));
    }
    let limits = BatchLimits {
        max_turns: model.config.max_turns,
        max_positions: model.config.max_positions,
    };
    let schedule = InverseSqrtSchedule {
        scale: cfg.lr_scale,
        d_model: model.config.d_model,
        warmup_steps: cfg.warmup_steps,
    };
    let mut adam = Adam::new(AdamConfig::default());
    let mut step = 0u64;
    let mut epoch = 0u64;
    let mut last = None;
    let mut clock = Instant::now();
    let mut tokens_since = 0usize;
    while step < cfg.max_steps {
        let batches = make_batches(examples, cfg.batch_tokens, derive_seed(cfg.seed, epoch, SALT_SHUFFLE), &limits)?;
        for batch in &batches {
            step += 1;
            let (mut f, parts, lambda) = batch_objective(&model, batch, cfg, step)?;
            f.graph.backward(parts.loss)?;
            let loss = f.graph.value(parts.loss).item()?;
            let mut grads = f.param_grads();
            drop(f);
            let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = schedule.rate(step);
            adam.step(model.params.tensors_mut(), &grads, lr)?;
            tokens_since += parts.tokens;
            if step % cfg.log_every == 0 || step == cfg.max_steps {
                let tokens_per_sec = cfg.log_timing.then(|| {
                    let rate = tokens_since as f64 / clock.elapsed().as_secs_f64().max(1e-9);
                    clock = Instant::now();
                    tokens_since = 0;
                    rate
                });
                let report = StepReport {
                    step,
                    stage: cfg.stage,
                    loss,
                    ce: parts.ce_per_token(),
                    kl: parts.kl.iter().map(|&(k, v)| (k, v / parts.tokens as f64)).collect(),
                    kl_total: parts.kl_per_word(),
                    lambda,
                    lr,
                    grad_norm,
                    tokens: parts.tokens,
                    tokens_per_sec,
                };
                on_event(TrainEvent::Step(&report))?;
                last = Some(report);
            }
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.max_steps {
                on_event(TrainEvent::Checkpoint { step, model: &model })?;
            }
            if step >= cfg.max_steps {
                break;
            }
        }
        epoch += 1;
    }
    on_event(TrainEvent::Checkpoint { step, model: &model })?;
    Ok(TrainOutcome {
        model,
        steps: step,
        last,
    })
}
