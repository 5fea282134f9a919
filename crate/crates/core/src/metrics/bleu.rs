use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BleuTokenize {
    /// Whitespace split after separating punctuation, close to mteval's 13a.
    #[default]
    Standard,
    /// Every non-space character is a token.
    Char,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BleuConfig {
    pub max_order: usize,
    pub lowercase: bool,
    pub tokenize: BleuTokenize,
}

impl Default for BleuConfig {
    fn default() -> Self {
        BleuConfig {
            max_order: 4,
            lowercase: false,
            tokenize: BleuTokenize::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuScore {
    /// 0 to 100.
    pub score: f64,
    /// Smoothed n-gram precisions, in percent.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn splits_always(c: char) -> bool {
    match c {
        '-' | '.' | ',' | '\'' => false,
        c if c.is_ascii_punctuation() => true,
        '\u{2000}'..='\u{206f}' | '\u{3000}'..='\u{303f}' | '\u{ff01}'..='\u{ff0f}' | '\u{ff1a}'..='\u{ff20}' => {
            !c.is_whitespace()
        }
        '\u{a1}' | '\u{ab}' | '\u{bb}' | '\u{bf}' => true,
        _ => false,
    }
}

/// Separates punctuation the way mteval's 13a tokenizer does for ASCII:
/// `.` and `,` stay inside numbers, `-` is split only after a digit, and
/// the apostrophe is kept. Non-ASCII punctuation is split as well.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 16);
    for (i, &c) in chars.iter().enumerate() {
        let prev = if i > 0 { chars[i - 1] } else { ' ' };
        let next = chars.get(i + 1).copied().unwrap_or(' ');
        let split = match c {
            '.' | ',' => !(prev.is_ascii_digit() && next.is_ascii_digit()),
            '-' => prev.is_ascii_digit(),
            c => splits_always(c),
        };
        if split {
            out.push(' ');
            out.push(c);
            out.push(' ');
        } else {
            out.push(c);
        }
    }
    out.split_whitespace().map(str::to_string).collect()
}

pub fn bleu_tokens(text: &str, cfg: &BleuConfig) -> Vec<String> {
    let text = if cfg.lowercase { text.to_lowercase() } else { text.to_string() };
    match cfg.tokenize {
        BleuTokenize::Standard => tokenize_13a(&text),
        BleuTokenize::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

/// Clipped n-gram matches and hypothesis n-gram counts for orders 1..=max.
pub fn ngram_stats(hyp: &[String], reference: &[String], max_order: usize) -> (Vec<usize>, Vec<usize>) {
    let mut matches = vec![0; max_order];
    let mut totals = vec![0; max_order];
    for n in 1..=max_order {
        if hyp.len() < n {
            continue;
        }
        let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_insert(0) += 1;
        }
        totals[n - 1] = hyp.len() + 1 - n;
        let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
        for g in hyp.windows(n) {
            *hyp_counts.entry(g).or_insert(0) += 1;
        }
        matches[n - 1] = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
    }
    (matches, totals)
}

/// Corpus BLEU from summed statistics, with exponential smoothing of zero
/// match counts.
pub fn bleu_from_stats(matches: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize) -> BleuScore {
    let order = matches.len();
    let mut fractions = vec![0.0; order];
    let mut smooth = 1.0;
    for n in 0..order {
        if totals[n] == 0 {
            break;
        }
        fractions[n] = if matches[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if order == 0 || fractions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean = fractions.iter().map(|p| p.ln()).sum::<f64>() / order as f64;
        100.0 * brevity_penalty * mean.exp()
    };
    BleuScore {
        score,
        precisions: fractions.iter().map(|p| 100.0 * p).collect(),
        brevity_penalty,
        matches: matches.to_vec(),
        totals: totals.to_vec(),
        hyp_len,
        ref_len,
    }
}

/// Corpus-level BLEU against one reference per hypothesis.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], cfg: &BleuConfig) -> Result<BleuScore> {
    if cfg.max_order == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    if hypotheses.is_empty() {
        return Err(Error::contract("BLEU needs at least one hypothesis"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let stats: Vec<_> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h.as_ref(), r.as_ref(), cfg))
        .collect();
    Ok(sum_stats(&stats, cfg.max_order, 0..stats.len()))
}

type SentenceStats = (Vec<usize>, Vec<usize>, usize, usize);

fn sentence_stats(hyp: &str, reference: &str, cfg: &BleuConfig) -> SentenceStats {
    let (h, r) = (bleu_tokens(hyp, cfg), bleu_tokens(reference, cfg));
    let (m, t) = ngram_stats(&h, &r, cfg.max_order);
    (m, t, h.len(), r.len())
}

fn sum_stats(stats: &[SentenceStats], order: usize, ids: impl Iterator<Item = usize>) -> BleuScore {
    let (mut m, mut t, mut hl, mut rl) = (vec![0; order], vec![0; order], 0, 0);
    for i in ids {
        let s = &stats[i];
        for n in 0..order {
            m[n] += s.0[n];
            t[n] += s.1[n];
        }
        hl += s.2;
        rl += s.3;
    }
    bleu_from_stats(&m, &t, hl, rl)
}

/// Paired bootstrap resampling: the share of `samples` resampled corpora in
/// which system `a` scores strictly higher BLEU than system `b`.
pub fn paired_bootstrap<S: AsRef<str>>(
    a: &[S],
    b: &[S],
    references: &[S],
    cfg: &BleuConfig,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if a.len() != references.len() || b.len() != references.len() || references.is_empty() {
        return Err(Error::contract("bootstrap needs two non-empty systems aligned with the references"));
    }
    let sa: Vec<_> = a.iter().zip(references).map(|(h, r)| sentence_stats(h.as_ref(), r.as_ref(), cfg)).collect();
    let sb: Vec<_> = b.iter().zip(references).map(|(h, r)| sentence_stats(h.as_ref(), r.as_ref(), cfg)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = references.len();
    let mut wins = 0;
    for _ in 0..samples {
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let x = sum_stats(&sa, cfg.max_order, ids.iter().copied()).score;
        let y = sum_stats(&sb, cfg.max_order, ids.iter().copied()).score;
        wins += usize::from(x > y);
    }
    Ok(wins as f64 / samples.max(1) as f64)
}
