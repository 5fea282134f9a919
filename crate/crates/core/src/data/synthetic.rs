//! Small synthetic bilingual dialogues for tests, benchmarks and smoke runs.
//!
//! Source words are `w0 .. wN`; each translates to its target word `tN`.
//! Utterances by role 1 end with an extra `ok` on the target side. The
//! ambiguous words `a0 .. a3` translate to `a0x`.. or `a0y`.. depending on
//! whether the marker word `m` occurred in one of the three preceding source
//! utterances, so part of each translation depends on dialogue history.
//!
//! Each source dialogue is translated `references` times. The translations
//! differ only in discourse particles `p0 .. p7` that end a small share of
//! target utterances at random, so the target carries information that
//! neither the source nor the context determines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{DialogueRecord, TurnRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub dialogues: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Translations per source dialogue.
    pub references: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dialogues: 50,
            min_turns: 4,
            max_turns: 8,
            words: 45,
            min_len: 4,
            max_len: 10,
            references: 5,
            seed: 7,
        }
    }
}

pub const MARKER: &str = "m";
pub const HISTORY: usize = 3;
const AMBIGUOUS: usize = 4;
const PARTICLES: usize = 8;
const PARTICLE_RATE: f64 = 0.05;

/// `marked`: whether the marker occurs in the recent history.
pub fn translate_word(source: &str, marked: bool) -> String {
    if let Some(n) = source.strip_prefix('w') {
        return format!("t{n}");
    }
    if source.starts_with('a') {
        return format!("{source}{}", if marked { 'y' } else { 'x' });
    }
    if source == MARKER {
        return "tm".into();
    }
    source.to_string()
}

/// Target side for a source utterance spoken by `role`, given the source
/// utterances that precede it in its dialogue.
pub fn translate_utterance(source: &str, role: usize, history: &[&str]) -> String {
    let start = history.len().saturating_sub(HISTORY);
    let marked = history[start..]
        .iter()
        .any(|u| u.split_whitespace().any(|w| w == MARKER));
    let mut words: Vec<String> = source.split_whitespace().map(|w| translate_word(w, marked)).collect();
    if role == 1 {
        words.push("ok".into());
    }
    words.join(" ")
}

fn utterance<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> String {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut words: Vec<String> = (0..len)
        .map(|_| format!("w{}", rng.random_range(0..spec.words)))
        .collect();
    if rng.random_bool(0.6) {
        let at = rng.random_range(0..len);
        words[at] = format!("a{}", rng.random_range(0..AMBIGUOUS));
    }
    if rng.random_bool(0.2) {
        let at = rng.random_range(0..len);
        words[at] = MARKER.to_string();
    }
    words.join(" ")
}

/// `spec.dialogues` dialogues with alternating roles and random turn
/// counts, consecutive groups of `spec.references` sharing their source side.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Vec<DialogueRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let refs = spec.references.max(1);
    let counts: Vec<usize> = (0..spec.dialogues.div_ceil(refs))
        .map(|_| rng.random_range(spec.min_turns..=spec.max_turns))
        .collect();
    let mut out = build(&counts, spec, &mut rng);
    out.truncate(spec.dialogues);
    out
}

/// Exactly `dialogues` dialogues holding `turns` turns in total, spread as
/// evenly as possible. Every dialogue gets its own source side.
pub fn synthetic_corpus_sized(dialogues: usize, turns: usize, spec: &SyntheticSpec) -> Vec<DialogueRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base = turns / dialogues.max(1);
    let extra = turns % dialogues.max(1);
    let counts: Vec<usize> = (0..dialogues).map(|i| base + usize::from(i < extra)).collect();
    let spec = SyntheticSpec { references: 1, ..*spec };
    build(&counts, &spec, &mut rng)
}

fn build<R: Rng>(counts: &[usize], spec: &SyntheticSpec, rng: &mut R) -> Vec<DialogueRecord> {
    let mut out = Vec::new();
    for &n in counts {
        let first_role = rng.random_range(0..2);
        let mut sources: Vec<String> = Vec::with_capacity(n);
        let mut plain = Vec::with_capacity(n);
        for t in 0..n {
            let src = utterance(rng, spec);
            let history: Vec<&str> = sources.iter().map(String::as_str).collect();
            plain.push(translate_utterance(&src, (first_role + t) % 2, &history));
            sources.push(src);
        }
        for _ in 0..spec.references.max(1) {
            let turns = sources
                .iter()
                .zip(&plain)
                .enumerate()
                .map(|(t, (src, tgt))| {
                    let mut tgt = tgt.clone();
                    if rng.random_bool(PARTICLE_RATE) {
                        tgt = format!("{tgt} p{}", rng.random_range(0..PARTICLES));
                    }
                    TurnRecord {
                        src: src.clone(),
                        tgt,
                        role: (first_role + t) % 2,
                    }
                })
                .collect();
            out.push(DialogueRecord {
                id: format!("syn{:04}", out.len()),
                turns,
            });
        }
    }
    out
}
