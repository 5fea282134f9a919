use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::context::{serialize_context, ChatExample, TokenSeq};
use super::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchLimits {
    pub max_turns: usize,
    pub max_positions: usize,
}

/// Padded `[batch, len]` id matrices for one kind of input sequence.
///
/// Padded slots hold [`PAD`] and mask `0.0`; real tokens have mask `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub roles: Vec<usize>,
    pub turns: Vec<usize>,
    pub mask: Vec<f64>,
}

impl SeqBatch {
    /// Turn indices are clamped to `max_turns - 1`.
    pub fn from_seqs(seqs: &[TokenSeq], max_turns: usize) -> Result<Self> {
        let len = seqs.iter().map(TokenSeq::len).max().unwrap_or(0);
        if seqs.is_empty() || len == 0 {
            return Err(Error::contract("cannot batch empty sequences"));
        }
        let n = seqs.len() * len;
        let mut b = SeqBatch {
            batch: seqs.len(),
            len,
            tokens: vec![PAD; n],
            positions: vec![0; n],
            roles: vec![0; n],
            turns: vec![0; n],
            mask: vec![0.0; n],
        };
        for (i, s) in seqs.iter().enumerate() {
            for j in 0..s.len() {
                let k = i * len + j;
                b.tokens[k] = s.tokens[j];
                b.positions[k] = j;
                b.roles[k] = s.roles[j];
                b.turns[k] = s.turns[j].min(max_turns.saturating_sub(1));
                b.mask[k] = 1.0;
            }
        }
        Ok(b)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .chunks(self.len)
            .map(|m| m.iter().filter(|&&v| v != 0.0).count())
            .collect()
    }
}

/// Model inputs for a group of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Indices into the example list this batch was built from.
    pub example_ids: Vec<usize>,
    pub source: SeqBatch,
    /// The reference `y_u` alone, encoded for the recognition networks.
    pub target: SeqBatch,
    /// `[bos] y_u` for teacher forcing.
    pub decoder_input: SeqBatch,
    /// `y_u [eos]`, aligned with `decoder_input`; padded with [`PAD`].
    pub decoder_target: Vec<usize>,
    pub ctx_role: SeqBatch,
    pub ctx_x: SeqBatch,
    pub ctx_y: SeqBatch,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.source.batch
    }

    /// Number of predicted (non-pad) target tokens, eos included.
    pub fn target_tokens(&self) -> usize {
        self.decoder_input.mask.iter().filter(|&&m| m != 0.0).count()
    }
}

fn check_len(what: &str, len: usize, limits: &BatchLimits) -> Result<()> {
    if len > limits.max_positions {
        return Err(Error::validation(format!(
            "{what} has {len} tokens; the model supports {}",
            limits.max_positions
        )));
    }
    Ok(())
}

/// Encoder-side inputs of a group of examples; the references are not used.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub source: SeqBatch,
    pub ctx_role: SeqBatch,
    pub ctx_x: SeqBatch,
    pub ctx_y: SeqBatch,
}

fn context_seqs(ex: &ChatExample, limits: &BatchLimits) -> [TokenSeq; 3] {
    [&ex.c_role, &ex.c_x, &ex.c_y].map(|utts| {
        let mut seq = serialize_context(utts);
        seq.truncate_front(limits.max_positions);
        seq
    })
}

pub fn make_source_batch(examples: &[&ChatExample], limits: &BatchLimits) -> Result<SourceBatch> {
    let mut src = Vec::with_capacity(examples.len());
    let mut ctx = [Vec::new(), Vec::new(), Vec::new()];
    for ex in examples {
        check_len("source utterance", ex.x_u.tokens.len(), limits)?;
        src.push(TokenSeq::from_utterance(&ex.x_u));
        for (slot, seq) in ctx.iter_mut().zip(context_seqs(ex, limits)) {
            slot.push(seq);
        }
    }
    let [c_role, c_x, c_y] = ctx;
    Ok(SourceBatch {
        source: SeqBatch::from_seqs(&src, limits.max_turns)?,
        ctx_role: SeqBatch::from_seqs(&c_role, limits.max_turns)?,
        ctx_x: SeqBatch::from_seqs(&c_x, limits.max_turns)?,
        ctx_y: SeqBatch::from_seqs(&c_y, limits.max_turns)?,
    })
}

pub fn make_batch(examples: &[&ChatExample], ids: Vec<usize>, limits: &BatchLimits) -> Result<Batch> {
    let mut src = Vec::with_capacity(examples.len());
    let mut tgt = Vec::with_capacity(examples.len());
    let mut dec_in = Vec::with_capacity(examples.len());
    let mut dec_out = Vec::with_capacity(examples.len());
    let mut ctx = [Vec::new(), Vec::new(), Vec::new()];
    for ex in examples {
        check_len("source utterance", ex.x_u.tokens.len(), limits)?;
        check_len("target utterance", ex.y_u.tokens.len() + 1, limits)?;
        src.push(TokenSeq::from_utterance(&ex.x_u));
        let y = TokenSeq::from_utterance(&ex.y_u);
        let mut input = TokenSeq {
            tokens: vec![BOS],
            roles: vec![ex.y_u.role],
            turns: vec![ex.y_u.turn],
        };
        input.tokens.extend(&y.tokens);
        input.roles.extend(&y.roles);
        input.turns.extend(&y.turns);
        let mut out = y.tokens.clone();
        out.push(EOS);
        tgt.push(y);
        dec_in.push(input);
        dec_out.push(out);
        for (slot, seq) in ctx.iter_mut().zip(context_seqs(ex, limits)) {
            slot.push(seq);
        }
    }
    let decoder_input = SeqBatch::from_seqs(&dec_in, limits.max_turns)?;
    let mut decoder_target = vec![PAD; decoder_input.batch * decoder_input.len];
    for (i, out) in dec_out.iter().enumerate() {
        decoder_target[i * decoder_input.len..i * decoder_input.len + out.len()].copy_from_slice(out);
    }
    let [c_role, c_x, c_y] = ctx;
    Ok(Batch {
        example_ids: ids,
        source: SeqBatch::from_seqs(&src, limits.max_turns)?,
        target: SeqBatch::from_seqs(&tgt, limits.max_turns)?,
        decoder_input,
        decoder_target,
        ctx_role: SeqBatch::from_seqs(&c_role, limits.max_turns)?,
        ctx_x: SeqBatch::from_seqs(&c_x, limits.max_turns)?,
        ctx_y: SeqBatch::from_seqs(&c_y, limits.max_turns)?,
    })
}

/// Groups example indices so that no group's padded source+target size
/// (`batch * (max_src + max_tgt + 1)`) exceeds `max_tokens`. The order is a
/// seeded shuffle.
pub fn plan_batches(examples: &[ChatExample], max_tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut plan = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut max_src, mut max_tgt) = (0, 0);
    for i in order {
        let ex = &examples[i];
        let (s, t) = (ex.x_u.tokens.len(), ex.y_u.tokens.len() + 1);
        if s + t > max_tokens {
            return Err(Error::validation(format!(
                "example {}#{} needs {} tokens, above the batch budget of {max_tokens}",
                ex.dialogue_id,
                ex.turn,
                s + t
            )));
        }
        let (ns, nt) = (max_src.max(s), max_tgt.max(t));
        if !current.is_empty() && (current.len() + 1) * (ns + nt) > max_tokens {
            plan.push(std::mem::take(&mut current));
            (max_src, max_tgt) = (s, t);
        } else {
            (max_src, max_tgt) = (ns, nt);
        }
        current.push(i);
    }
    if !current.is_empty() {
        plan.push(current);
    }
    Ok(plan)
}

pub fn make_batches(examples: &[ChatExample], max_tokens: usize, seed: u64, limits: &BatchLimits) -> Result<Vec<Batch>> {
    plan_batches(examples, max_tokens, seed)?
        .into_iter()
        .map(|ids| {
            let group: Vec<&ChatExample> = ids.iter().map(|&i| &examples[i]).collect();
            make_batch(&group, ids, limits)
        })
        .collect()
}
