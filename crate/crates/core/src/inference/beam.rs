use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the latents are fixed before decoding starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LatentMode {
    /// Use the prior mean.
    #[default]
    PriorMean,
    /// Draw one sample from the prior.
    PriorSample,
}

impl FromStr for LatentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LatentMode::PriorMean),
            "sample" => Ok(LatentMode::PriorSample),
            other => Err(Error::Config(format!("unknown latent mode `{other}` (expected mean or sample)"))),
        }
    }
}

impl fmt::Display for LatentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatentMode::PriorMean => "mean",
            LatentMode::PriorSample => "sample",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Length-penalty exponent.
    pub alpha: f64,
    /// Most tokens generated per hypothesis, eos included.
    pub max_length: usize,
    pub latent: LatentMode,
    /// Seeds latent sampling.
    pub seed: u64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            alpha: 0.6,
            max_length: 100,
            latent: LatentMode::PriorMean,
            seed: 1,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("length penalty must be a finite value >= 0, got {}", self.alpha)));
        }
        if self.max_length == 0 {
            return Err(Error::Config("max_length must be at least 1".into()));
        }
        Ok(())
    }
}

/// `((5 + n) / 6)^alpha`.
pub fn length_penalty(n: usize, alpha: f64) -> f64 {
    ((5.0 + n as f64) / 6.0).powf(alpha)
}

/// Anything that scores the next token after a prefix.
pub trait StepModel {
    fn eos(&self) -> usize;

    /// Next-token log-probabilities after each prefix. All prefixes in one
    /// call have the same length.
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the closing eos.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob / length_penalty(n)`, where `n` counts the eos of finished
    /// hypotheses.
    pub score: f64,
    /// False when `max_length` ran out before any hypothesis emitted eos.
    pub finished: bool,
}

fn scored<M: StepModel + ?Sized>(model: &mut M, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let rows = model.next_log_probs(prefixes)?;
    if rows.len() != prefixes.len() {
        return Err(Error::contract(format!(
            "step model returned {} rows for {} prefixes",
            rows.len(),
            prefixes.len()
        )));
    }
    let eos = model.eos();
    for row in &rows {
        if eos >= row.len() {
            return Err(Error::contract("eos id outside the step model's vocabulary"));
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain {
                op: "beam_search",
                msg: "NaN log-probability".into(),
            });
        }
    }
    Ok(rows)
}

/// Always picks the most likely next token (lowest id on ties).
pub fn greedy<M: StepModel + ?Sized>(model: &mut M, max_length: usize, alpha: f64) -> Result<Hypothesis> {
    let eos = model.eos();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_length {
        let row = scored(model, std::slice::from_ref(&tokens))?.remove(0);
        let mut best = 0;
        for (t, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = t;
            }
        }
        log_prob += row[best];
        if best == eos {
            return Ok(Hypothesis {
                score: log_prob / length_penalty(tokens.len() + 1, alpha),
                tokens,
                log_prob,
                finished: true,
            });
        }
        tokens.push(best);
    }
    Ok(Hypothesis {
        score: log_prob / length_penalty(tokens.len(), alpha),
        tokens,
        log_prob,
        finished: false,
    })
}

/// Beam search with a shrinking beam: each hypothesis that emits eos takes
/// one slot out of the beam. Returns the finished hypothesis with the best
/// length-normalized score.
pub fn beam_search<M: StepModel + ?Sized>(model: &mut M, cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let eos = model.eos();
    let lp = |n: usize| length_penalty(n, cfg.alpha);
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_length {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let rows = scored(model, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, row) in rows.iter().enumerate() {
            cands.extend(row.iter().enumerate().map(|(t, &v)| (live[b].1 + v, b, t)));
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let width = cfg.beam_size - finished.len();
        let mut next = Vec::with_capacity(width);
        for (log_prob, b, t) in cands.into_iter().take(width) {
            let prefix = &live[b].0;
            if t == eos {
                finished.push(Hypothesis {
                    tokens: prefix.clone(),
                    log_prob,
                    score: log_prob / lp(prefix.len() + 1),
                    finished: true,
                });
            } else {
                let mut p = prefix.clone();
                p.push(t);
                next.push((p, log_prob));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Extensions only lower the log-probability, and no hypothesis gets
        // a larger penalty than one of `max_length` tokens.
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_open = live.iter().map(|(_, l)| l / lp(cfg.max_length)).fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_open {
            break;
        }
    }
    let pick = |hs: Vec<Hypothesis>| {
        hs.into_iter()
            .reduce(|best, h| if h.score > best.score { h } else { best })
    };
    if let Some(h) = pick(finished) {
        return Ok(h);
    }
    let open = live
        .into_iter()
        .map(|(tokens, log_prob)| Hypothesis {
            score: log_prob / lp(tokens.len()),
            tokens,
            log_prob,
            finished: false,
        })
        .collect();
    pick(open).ok_or_else(|| Error::contract("beam search produced no hypotheses"))
}
