use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::data::vocab::CLS;
use crate::data::SeqBatch;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const NEG_INF: f64 = -1e9;
const LN_EPS: f64 = 1e-6;

/// Attention probabilities captured during a forward pass,
/// `[batch, heads, queries, keys]`.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub name: String,
    pub weights: Tensor,
}

/// One forward pass over a model: a fresh graph, parameters bound lazily
/// by name, and the dropout stream.
pub struct Forward<'m> {
    pub graph: Graph,
    model: &'m Model,
    bound: BTreeMap<String, Var>,
    training: bool,
    rng: ChaCha8Rng,
    positions: Option<Var>,
    record: bool,
    pub attention: Vec<AttentionRecord>,
}

impl<'m> Forward<'m> {
    fn with_graph(model: &'m Model, graph: Graph, training: bool, seed: u64) -> Self {
        Forward {
            graph,
            model,
            bound: BTreeMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            positions: None,
            record: false,
            attention: Vec::new(),
        }
    }

    /// Gradients enabled, dropout active.
    pub fn train(model: &'m Model, seed: u64) -> Self {
        Self::with_graph(model, Graph::new(), true, seed)
    }

    /// Gradients enabled, dropout off.
    pub fn eval(model: &'m Model) -> Self {
        Self::with_graph(model, Graph::new(), false, 0)
    }

    /// No gradients, dropout off.
    pub fn inference(model: &'m Model) -> Self {
        Self::with_graph(model, Graph::without_grad(), false, 0)
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Keep attention probabilities in [`Forward::attention`].
    pub fn record_attention(&mut self, on: bool) {
        self.record = on;
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .model
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::contract(format!("model has no parameter `{name}`")))?;
        let v = self.graph.param(t.clone());
        self.bound.insert(key.clone(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.graph.grad(v).map(|g| (name.clone(), g.into_data())))
            .collect()
    }

    /// Current tape length; see [`Forward::rewind`].
    pub fn mark(&self) -> usize {
        self.graph.len()
    }

    /// Drops nodes recorded after `mark` while keeping bound parameters
    /// that predate it.
    pub fn rewind(&mut self, mark: usize) {
        self.graph.truncate(mark);
        self.bound.retain(|_, v| v.index() < mark);
        if self.positions.is_some_and(|v| v.index() >= mark) {
            self.positions = None;
        }
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout;
        self.graph.dropout(x, p, self.training, &mut self.rng)
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let y = self.graph.matmul_t(x, w)?;
        self.graph.add(y, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.gamma"))?;
        let b = self.param(&format!("{name}.beta"))?;
        self.graph.layer_norm(x, g, b, LN_EPS)
    }

    // ----- embeddings -----------------------------------------------------------

    /// Sum of word, position, role and turn embeddings: `[batch, len, d]`.
    pub fn embed(&mut self, seq: &SeqBatch) -> Result<Var> {
        let c = &self.model.config;
        let checks = [
            ("token", &seq.tokens, c.vocab_size),
            ("position", &seq.positions, c.max_positions),
            ("role", &seq.roles, c.num_roles),
            ("turn", &seq.turns, c.max_turns),
        ];
        for (what, ids, extent) in checks {
            if let Some(&bad) = ids.iter().find(|&&i| i >= extent) {
                return Err(Error::validation(format!(
                    "{what} index {bad} outside an embedding table of {extent} rows"
                )));
            }
        }
        let lead = [seq.batch, seq.len];
        let pe = match self.positions {
            Some(v) => v,
            None => {
                let v = self.graph.constant(self.model.positional_table().clone());
                self.positions = Some(v);
                v
            }
        };
        let tables = [
            (self.param("embed.word")?, &seq.tokens),
            (pe, &seq.positions),
            (self.param("embed.role")?, &seq.roles),
            (self.param("embed.turn")?, &seq.turns),
        ];
        let mut sum: Option<Var> = None;
        for (table, ids) in tables {
            let e = self.graph.gather_rows(table, ids, &lead)?;
            sum = Some(match sum {
                None => e,
                Some(s) => self.graph.add(s, e)?,
            });
        }
        self.dropout(sum.expect("four tables"))
    }

    // ----- attention ---------------------------------------------------------------

    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        let h = self.model.config.heads;
        let x = self.graph.reshape(x, &[s[0], s[1], h, s[2] / h])?;
        self.graph.permute(x, &[0, 2, 1, 3])
    }

    /// Multi-head attention of `x: [B, Lq, d]` over `mem: [B, Lk, d]`;
    /// `bias` broadcasts against `[B, heads, Lq, Lk]`.
    fn attention(&mut self, name: &str, x: Var, mem: Var, bias: Var) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        let (d, h) = (self.model.config.d_model, self.model.config.heads);
        let q = self.linear(x, &format!("{name}.q"))?;
        let k = self.linear(mem, &format!("{name}.k"))?;
        let v = self.linear(mem, &format!("{name}.v"))?;
        let (q, k, v) = (self.split_heads(q)?, self.split_heads(k)?, self.split_heads(v)?);
        let scores = self.graph.matmul_t(q, k)?;
        let scores = self.graph.scale(scores, 1.0 / ((d / h) as f64).sqrt());
        let scores = self.graph.add(scores, bias)?;
        let probs = self.graph.softmax_last_dim(scores)?;
        if self.record {
            self.attention.push(AttentionRecord {
                name: name.to_string(),
                weights: self.graph.value(probs).clone(),
            });
        }
        let ctx = self.graph.matmul(probs, v)?;
        let ctx = self.graph.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.graph.reshape(ctx, &[s[0], s[1], d])?;
        self.linear(ctx, &format!("{name}.o"))
    }

    /// `[B, 1, 1, L]` additive mask hiding padded keys.
    fn key_bias(&mut self, mask: &[f64], batch: usize) -> Result<Var> {
        let len = mask.len() / batch;
        let data = mask.iter().map(|&m| if m == 0.0 { NEG_INF } else { 0.0 }).collect();
        Ok(self.graph.constant(Tensor::new(&[batch, 1, 1, len], data)?))
    }

    /// `[B, 1, L, L]` mask hiding padded and future keys.
    fn causal_bias(&mut self, mask: &[f64], batch: usize) -> Result<Var> {
        let len = mask.len() / batch;
        let mut data = vec![0.0; batch * len * len];
        for b in 0..batch {
            for i in 0..len {
                for j in 0..len {
                    if j > i || mask[b * len + j] == 0.0 {
                        data[(b * len + i) * len + j] = NEG_INF;
                    }
                }
            }
        }
        Ok(self.graph.constant(Tensor::new(&[batch, 1, len, len], data)?))
    }

    fn residual(&mut self, x: Var, sub: Var, norm: &str) -> Result<Var> {
        let sub = self.dropout(sub)?;
        let sum = self.graph.add(x, sub)?;
        self.norm(sum, norm)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let hidden = self.linear(x, &format!("{prefix}.ffn.in"))?;
        let hidden = self.graph.relu(hidden);
        let hidden = self.dropout(hidden)?;
        self.linear(hidden, &format!("{prefix}.ffn.out"))
    }

    // ----- encoder -----------------------------------------------------------------

    fn check_mask(&self, x: Var, mask: &[f64]) -> Result<usize> {
        let s = self.graph.shape(x);
        if s.len() != 3 || s[0] * s[1] != mask.len() {
            return Err(Error::shape("mask", s, &[mask.len()]));
        }
        Ok(s[0])
    }

    /// Runs encoder layers `layers` over embedded input `x: [B, L, d]`.
    pub fn encoder_layers(&mut self, mut x: Var, mask: &[f64], layers: Range<usize>) -> Result<Var> {
        let batch = self.check_mask(x, mask)?;
        if layers.is_empty() {
            return Ok(x);
        }
        let bias = self.key_bias(mask, batch)?;
        for l in layers {
            let p = format!("encoder.{l}");
            let a = self.attention(&format!("{p}.self_attn"), x, x, bias)?;
            x = self.residual(x, a, &format!("{p}.norm1"))?;
            let f = self.ffn(x, &p)?;
            x = self.residual(x, f, &format!("{p}.norm2"))?;
        }
        Ok(x)
    }

    /// Final encoder states `[B, L, d]`.
    pub fn encode(&mut self, seq: &SeqBatch) -> Result<Var> {
        let x = self.embed(seq)?;
        let n = self.model.config.encoder_layers;
        self.encoder_layers(x, &seq.mask, 0..n)
    }

    /// The `[cls]` state after the first encoder layer: `[B, d]`.
    pub fn encode_context(&mut self, seq: &SeqBatch) -> Result<Var> {
        if (0..seq.batch).any(|b| seq.tokens[b * seq.len] != CLS) {
            return Err(Error::contract("context sequence must start with [cls]"));
        }
        let x = self.embed(seq)?;
        let n = self.model.config.encoder_layers.min(1);
        let h = self.encoder_layers(x, &seq.mask, 0..n)?;
        let d = self.model.config.d_model;
        let flat = self.graph.reshape(h, &[seq.batch * seq.len, d])?;
        let rows: Vec<usize> = (0..seq.batch).map(|b| b * seq.len).collect();
        self.graph.gather_rows(flat, &rows, &[seq.batch])
    }

    /// Mean of the unmasked rows of `h: [B, L, d]`.
    pub fn pool(&mut self, h: Var, mask: &[f64]) -> Result<Var> {
        self.graph.mean_masked(h, mask)
    }

    // ----- decoder -----------------------------------------------------------------

    /// Decoder over embedded targets `y: [B, n, d]` attending to
    /// `h_enc: [B, m, d]`.
    pub fn decoder_layers(&mut self, mut y: Var, y_mask: &[f64], h_enc: Var, src_mask: &[f64]) -> Result<Var> {
        let batch = self.check_mask(y, y_mask)?;
        if self.check_mask(h_enc, src_mask)? != batch {
            return Err(Error::shape("decode", self.graph.shape(y), self.graph.shape(h_enc)));
        }
        let n = self.model.config.decoder_layers;
        if n == 0 {
            return Ok(y);
        }
        let self_bias = self.causal_bias(y_mask, batch)?;
        let cross_bias = self.key_bias(src_mask, batch)?;
        for l in 0..n {
            let p = format!("decoder.{l}");
            let a = self.attention(&format!("{p}.self_attn"), y, y, self_bias)?;
            y = self.residual(y, a, &format!("{p}.norm1"))?;
            let c = self.attention(&format!("{p}.cross_attn"), y, h_enc, cross_bias)?;
            y = self.residual(y, c, &format!("{p}.norm2"))?;
            let f = self.ffn(y, &p)?;
            y = self.residual(y, f, &format!("{p}.norm3"))?;
        }
        Ok(y)
    }

    /// Top decoder states `[B, n, d]` for teacher-forced input.
    pub fn decode(&mut self, input: &SeqBatch, h_enc: Var, src_mask: &[f64]) -> Result<Var> {
        let y = self.embed(input)?;
        self.decoder_layers(y, &input.mask, h_enc, src_mask)
    }

    // ----- output ------------------------------------------------------------------

    /// `tanh(W_p [h_t; z_1; ..] + b_p)` with each `z: [B, d_z]` broadcast
    /// over the positions of `h_top: [B, n, d]`.
    pub fn fuse(&mut self, h_top: Var, latents: &[Var]) -> Result<Var> {
        let s = self.graph.shape(h_top).to_vec();
        let dz = self.model.config.latent_dim;
        let mut parts = vec![h_top];
        for &z in latents {
            if self.graph.shape(z) != [s[0], dz] {
                return Err(Error::shape("fuse", self.graph.shape(z), &[s[0], dz]));
            }
            let z = self.graph.reshape(z, &[s[0], 1, dz])?;
            parts.push(self.graph.broadcast_to(z, &[s[0], s[1], dz])?);
        }
        let cat = self.graph.concat_last_dim(&parts)?;
        let fw = self.param("fuse.weight")?;
        let w = self.graph.shape(fw).to_vec();
        if w[1] != self.graph.shape(cat)[2] {
            return Err(Error::shape("fuse", &w, self.graph.shape(cat)));
        }
        let a = self.linear(cat, "fuse")?;
        Ok(self.graph.tanh(a))
    }

    pub fn logits(&mut self, o: Var) -> Result<Var> {
        self.linear(o, "output")
    }

    pub fn log_probs(&mut self, o: Var) -> Result<Var> {
        let l = self.logits(o)?;
        self.graph.log_softmax_last_dim(l)
    }

    pub fn probs(&mut self, o: Var) -> Result<Var> {
        let l = self.logits(o)?;
        self.graph.softmax_last_dim(l)
    }
}
