//! Beam-search decoding and turn-by-turn dialogue replay.

mod beam;
mod replay;

use rand::Rng;

use crate::data::vocab::{BOS, EOS};
use crate::data::{make_source_batch, BatchLimits, ChatExample, SeqBatch, TokenSeq};
use crate::error::Result;
use crate::latent::{draw_noise, prior_forward, sample, Conditioning};
use crate::model::{Forward, Model};
use crate::tensor::Var;

pub use beam::{beam_search, greedy, length_penalty, BeamConfig, Hypothesis, LatentMode, StepModel};
pub use replay::{replay_dialogue, ReplayMode, TurnTranslation};

/// A model bound to one encoded example: source and contexts are encoded
/// and the latents fixed once, then each call runs the decoder over the
/// current prefixes.
pub struct Decoder<'m> {
    f: Forward<'m>,
    h_enc: Var,
    src_mask: Vec<f64>,
    latents: Vec<Var>,
    role: usize,
    turn: usize,
    mark: usize,
}

impl<'m> Decoder<'m> {
    pub fn new<R: Rng + ?Sized>(model: &'m Model, example: &ChatExample, mode: LatentMode, rng: &mut R) -> Result<Self> {
        let limits = BatchLimits {
            max_turns: model.config.max_turns,
            max_positions: model.config.max_positions,
        };
        let batch = make_source_batch(&[example], &limits)?;
        let mut f = Forward::inference(model);
        let mut latents = Vec::new();
        let h_enc = match model.config.latents {
            None => f.encode(&batch.source)?,
            Some(set) => {
                let cond = Conditioning::encode(&mut f, &batch.source, &batch.ctx_role, &batch.ctx_x, &batch.ctx_y, set)?;
                for kind in set.iter() {
                    let reps = cond.reps(kind)?;
                    let prior = prior_forward(&mut f, kind, &reps)?;
                    latents.push(match mode {
                        LatentMode::PriorMean => prior.mu,
                        LatentMode::PriorSample => {
                            let noise = draw_noise(&f.graph, prior, rng);
                            sample(&mut f.graph, prior, noise)?
                        }
                    });
                }
                cond.h_enc
            }
        };
        let mark = f.mark();
        Ok(Decoder {
            f,
            h_enc,
            src_mask: batch.source.mask,
            latents,
            role: example.x_u.role,
            turn: example.x_u.turn,
            mark,
        })
    }

    /// Longest output the model's positions allow, eos included.
    pub fn max_length(&self) -> usize {
        self.f.model().config.max_positions.saturating_sub(1).max(1)
    }

    fn run(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let k = prefixes.len();
        let seqs: Vec<TokenSeq> = prefixes
            .iter()
            .map(|p| {
                let mut tokens = vec![BOS];
                tokens.extend(p);
                TokenSeq {
                    roles: vec![self.role; tokens.len()],
                    turns: vec![self.turn; tokens.len()],
                    tokens,
                }
            })
            .collect();
        let config = &self.f.model().config;
        let (d, dz) = (config.d_model, config.latent_dim);
        let input = SeqBatch::from_seqs(&seqs, config.max_turns)?;
        let len = input.len;
        let m = self.src_mask.len();
        let h_enc = self.f.graph.broadcast_to(self.h_enc, &[k, m, d])?;
        let src_mask = self.src_mask.repeat(k);
        let h = self.f.decode(&input, h_enc, &src_mask)?;
        let flat = self.f.graph.reshape(h, &[k * len, d])?;
        let last: Vec<usize> = (0..k).map(|i| i * len + len - 1).collect();
        let mut top = self.f.graph.gather_rows(flat, &last, &[k, 1])?;
        if self.f.model().config.latents.is_some() {
            let zs = self
                .latents
                .clone()
                .into_iter()
                .map(|z| self.f.graph.broadcast_to(z, &[k, dz]))
                .collect::<Result<Vec<_>>>()?;
            top = self.f.fuse(top, &zs)?;
        }
        let logp = self.f.log_probs(top)?;
        let v = self.f.graph.shape(logp)[2];
        let rows = self.f.graph.value(logp).data().chunks(v).map(<[f64]>::to_vec).collect();
        Ok(rows)
    }
}

impl StepModel for Decoder<'_> {
    fn eos(&self) -> usize {
        EOS
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let out = self.run(prefixes);
        self.f.rewind(self.mark);
        out
    }
}

/// Beam-search translation of one example; `max_length` is capped by the
/// model's positions.
pub fn translate_example<R: Rng + ?Sized>(
    model: &Model,
    example: &ChatExample,
    cfg: &BeamConfig,
    rng: &mut R,
) -> Result<Hypothesis> {
    let mut dec = Decoder::new(model, example, cfg.latent, rng)?;
    let cfg = BeamConfig {
        max_length: cfg.max_length.min(dec.max_length()),
        ..cfg.clone()
    };
    beam_search(&mut dec, &cfg)
}
