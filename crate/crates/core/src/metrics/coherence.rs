use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Word embeddings read from the plain-text format: a `count dim` header,
/// then `token v1 .. vdim` per line.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        WordVectors {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape("word vector", &[vector.len()], &[self.dim]));
        }
        self.vectors.insert(token.into(), vector);
        Ok(())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    /// Unknown tokens map to `None`; they count as the zero vector.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: name.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing `count dim` header".into()))?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(1, format!("bad header {header:?}")))?;
        let [count, dim] = nums[..] else {
            return Err(err(1, format!("header must be `count dim`, got {header:?}")));
        };
        let mut out = WordVectors::new(dim);
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line");
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(i + 1, format!("non-numeric component for `{token}`")))?;
            if values.len() != dim {
                return Err(err(i + 1, format!("`{token}` has {} components, expected {dim}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err(i + 1, format!("non-finite component for `{token}`")));
            }
            out.vectors.insert(token.to_string(), values);
        }
        if out.len() != count {
            log::warn!("{name}: header announces {count} vectors, found {}", out.len());
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Mean word vector of the whitespace tokens of `sentence`.
    pub fn sentence_vector(&self, sentence: &str) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        let mut n = 0usize;
        for tok in sentence.split_whitespace() {
            n += 1;
            if let Some(v) = self.get(tok) {
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            }
        }
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
        sum
    }
}

/// Cosine of the mean word vectors of two sentences.
pub fn coherence(a: &str, b: &str, vectors: &WordVectors) -> Result<f64> {
    let (u, v) = (vectors.sentence_vector(a), vectors.sentence_vector(b));
    let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain {
            op: "coherence",
            msg: "a sentence has a zero mean vector (no known words)".into(),
        });
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRow {
    pub depth: usize,
    /// Absent when no pair could be scored.
    pub mean: Option<f64>,
    pub pairs: usize,
    /// Pairs whose similarity is undefined.
    pub skipped: usize,
}

/// For each depth `k`, the mean coherence between every translation and the
/// `k`-th preceding utterance of `history` in the same dialogue.
///
/// `translations[d][t]` and `history[d][t]` are turn `t` of dialogue `d`.
pub fn coherence_report<S: AsRef<str>>(
    translations: &[Vec<S>],
    history: &[Vec<S>],
    vectors: &WordVectors,
    depths: &[usize],
) -> Result<Vec<DepthRow>> {
    if translations.len() != history.len() || translations.iter().zip(history).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::contract("translations are not aligned with the dialogue turns"));
    }
    let mut rows = Vec::new();
    for &depth in depths {
        if depth == 0 {
            return Err(Error::Config("coherence depth must be at least 1".into()));
        }
        let (mut sum, mut pairs, mut skipped) = (0.0, 0, 0);
        for (hyps, ctx) in translations.iter().zip(history) {
            for t in depth..hyps.len() {
                match coherence(hyps[t].as_ref(), ctx[t - depth].as_ref(), vectors) {
                    Ok(c) => {
                        sum += c;
                        pairs += 1;
                    }
                    Err(Error::Domain { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        if pairs == 0 && skipped == 0 {
            continue;
        }
        rows.push(DepthRow {
            depth,
            mean: (pairs > 0).then(|| sum / pairs as f64),
            pairs,
            skipped,
        });
    }
    Ok(rows)
}
