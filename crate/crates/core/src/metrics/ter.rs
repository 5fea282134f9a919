use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TerConfig {
    pub lowercase: bool,
    /// Longest block moved by one shift.
    pub max_shift_len: usize,
}

impl Default for TerConfig {
    fn default() -> Self {
        TerConfig {
            lowercase: true,
            max_shift_len: 10,
        }
    }
}

/// Edits of one hypothesis against its reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TerStats {
    pub shifts: usize,
    /// Insertions, deletions and substitutions after the shifts.
    pub edits: usize,
    pub ref_len: usize,
}

impl TerStats {
    pub fn rate(&self) -> f64 {
        (self.shifts + self.edits) as f64 / self.ref_len as f64
    }
}

/// Word-level Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn contains<T: PartialEq>(haystack: &[T], needle: &[T]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// `words` with `words[i..i + len]` moved to sit before index `to` of the
/// remaining sequence.
fn shifted<T: Clone>(words: &[T], i: usize, len: usize, to: usize) -> Vec<T> {
    let mut rest: Vec<T> = words[..i].iter().chain(&words[i + len..]).cloned().collect();
    let block = words[i..i + len].to_vec();
    rest.splice(to..to, block);
    rest
}

/// Greedy shift search: repeatedly apply the block move (block found
/// verbatim in the reference) that lowers shifts + edits the most, then
/// count the remaining edits.
pub fn ter_tokens<T: PartialEq + Clone>(hyp: &[T], reference: &[T], max_shift_len: usize) -> Result<TerStats> {
    if reference.is_empty() {
        return Err(Error::contract("TER needs a non-empty reference"));
    }
    let mut h = hyp.to_vec();
    let mut shifts = 0;
    loop {
        let base = edit_distance(&h, reference);
        if base == 0 {
            break;
        }
        let mut best: Option<(usize, Vec<T>)> = None;
        for i in 0..h.len() {
            for len in 1..=max_shift_len.min(h.len() - i) {
                if !contains(reference, &h[i..i + len]) {
                    break;
                }
                for to in 0..=h.len() - len {
                    if to == i {
                        continue;
                    }
                    let cand = shifted(&h, i, len, to);
                    let cost = edit_distance(&cand, reference) + 1;
                    if cost < base && best.as_ref().is_none_or(|(c, _)| cost < *c) {
                        best = Some((cost, cand));
                    }
                }
            }
        }
        match best {
            Some((_, cand)) => {
                h = cand;
                shifts += 1;
            }
            None => break,
        }
    }
    Ok(TerStats {
        shifts,
        edits: edit_distance(&h, reference),
        ref_len: reference.len(),
    })
}

fn words(text: &str, cfg: &TerConfig) -> Vec<String> {
    let text = if cfg.lowercase { text.to_lowercase() } else { text.to_string() };
    text.split_whitespace().map(str::to_string).collect()
}

pub fn ter(hyp: &str, reference: &str, cfg: &TerConfig) -> Result<TerStats> {
    ter_tokens(&words(hyp, cfg), &words(reference, cfg), cfg.max_shift_len)
}

/// Total edits over total reference words.
pub fn corpus_ter<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R], cfg: &TerConfig) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::contract("TER needs equally many hypotheses and references, at least one"));
    }
    let (mut edits, mut len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let s = ter(h.as_ref(), r.as_ref(), cfg)?;
        edits += s.shifts + s.edits;
        len += s.ref_len;
    }
    Ok(edits as f64 / len as f64)
}
