//! Prior and recognition networks for the dialogue latents, reparameterized
//! sampling and the diagonal-Gaussian KL divergence.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::SeqBatch;
use crate::error::{Error, Result};
use crate::model::params::latent_name;
use crate::model::Forward;
use crate::tensor::{Graph, Tensor, Var};

pub use crate::model::{LatentKind, LatentSet};

/// Added to the softplus output so that sigma stays strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian with `mu` and `sigma` of shape `[batch, d_z]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Gaussian {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Net {
    Prior,
    Posterior,
}

impl Net {
    fn name(self) -> &'static str {
        match self {
            Net::Prior => "prior",
            Net::Posterior => "posterior",
        }
    }
}

fn gaussian_mlp(f: &mut Forward, net: Net, kind: LatentKind, inputs: &[Var]) -> Result<Gaussian> {
    let expected = kind.prior_inputs() + usize::from(net == Net::Posterior);
    if inputs.len() != expected {
        return Err(Error::contract(format!(
            "{} network for `{kind}` takes {expected} representations, got {}",
            net.name(),
            inputs.len()
        )));
    }
    let d = f.model().config.d_model;
    let dz = f.model().config.latent_dim;
    for &v in inputs {
        let s = f.graph.shape(v);
        if s.len() != 2 || s[1] != d {
            return Err(Error::shape("latent input", s, &[s[0], d]));
        }
    }
    let x = f.graph.concat_last_dim(inputs)?;
    let h = f.linear(x, &latent_name(net.name(), kind, "hidden"))?;
    let h = f.graph.tanh(h);
    let out = f.linear(h, &latent_name(net.name(), kind, "head"))?;
    let mu = f.graph.slice_last_dim(out, 0, dz)?;
    let pre = f.graph.slice_last_dim(out, dz, dz)?;
    let sigma = f.graph.softplus(pre);
    let sigma = f.graph.add_scalar(sigma, SIGMA_FLOOR);
    Ok(Gaussian { mu, sigma })
}

/// `p(z | reps)`; `reps` in the order of the kind's signature.
pub fn prior_forward(f: &mut Forward, kind: LatentKind, reps: &[Var]) -> Result<Gaussian> {
    gaussian_mlp(f, Net::Prior, kind, reps)
}

/// `q(z | reps, h_y)`.
pub fn posterior_forward(f: &mut Forward, kind: LatentKind, reps: &[Var], h_y: Var) -> Result<Gaussian> {
    let mut inputs = reps.to_vec();
    inputs.push(h_y);
    gaussian_mlp(f, Net::Posterior, kind, &inputs)
}

/// Standard-normal noise shaped like `g.mu`.
pub fn draw_noise<R: Rng + ?Sized>(graph: &Graph, g: Gaussian, rng: &mut R) -> Tensor {
    let shape = graph.shape(g.mu).to_vec();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&shape, data).expect("shape of an existing value")
}

/// `z = mu + sigma * noise`.
pub fn sample(graph: &mut Graph, g: Gaussian, noise: Tensor) -> Result<Var> {
    if noise.shape() != graph.shape(g.mu) {
        return Err(Error::shape("sample", noise.shape(), graph.shape(g.mu)));
    }
    let e = graph.constant(noise);
    let scaled = graph.mul(g.sigma, e)?;
    graph.add(g.mu, scaled)
}

/// `KL(q || p)` summed over every element (batch and latent dimensions).
pub fn kl_divergence(graph: &mut Graph, q: Gaussian, p: Gaussian) -> Result<Var> {
    let per = kl_elementwise(graph, q, p)?;
    Ok(graph.sum_all(per))
}

/// Elementwise KL terms, shaped like `q.mu`.
pub fn kl_elementwise(graph: &mut Graph, q: Gaussian, p: Gaussian) -> Result<Var> {
    for v in [q.sigma, p.mu, p.sigma] {
        if graph.shape(v) != graph.shape(q.mu) {
            return Err(Error::shape("kl_divergence", graph.shape(q.mu), graph.shape(v)));
        }
    }
    let log_p = graph.log(p.sigma);
    let log_q = graph.log(q.sigma);
    let log_ratio = graph.sub(log_p, log_q)?;
    let q_var = graph.mul(q.sigma, q.sigma)?;
    let diff = graph.sub(q.mu, p.mu)?;
    let diff2 = graph.mul(diff, diff)?;
    let num = graph.add(q_var, diff2)?;
    let p_var = graph.mul(p.sigma, p.sigma)?;
    let p_var2 = graph.scale(p_var, 2.0);
    let frac = graph.div(num, p_var2)?;
    let sum = graph.add(log_ratio, frac)?;
    Ok(graph.add_scalar(sum, -0.5))
}

/// Pooled and context representations that condition the latents.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    /// Final encoder states of the source, `[B, m, d]`.
    pub h_enc: Var,
    /// Pooled source, `[B, d]`.
    pub h_x: Var,
    pub ctx_role: Option<Var>,
    pub ctx_x: Option<Var>,
    pub ctx_y: Option<Var>,
}

impl Conditioning {
    /// Encodes the source and the contexts `latents` need.
    pub fn encode(
        f: &mut Forward,
        source: &SeqBatch,
        ctx_role: &SeqBatch,
        ctx_x: &SeqBatch,
        ctx_y: &SeqBatch,
        latents: LatentSet,
    ) -> Result<Self> {
        let h_enc = f.encode(source)?;
        let h_x = f.pool(h_enc, &source.mask)?;
        let needs = |k: LatentKind| latents.contains(k);
        let ctx_role = match needs(LatentKind::Role) {
            true => Some(f.encode_context(ctx_role)?),
            false => None,
        };
        let ctx_x_rep = match needs(LatentKind::Dia) || needs(LatentKind::Tra) {
            true => Some(f.encode_context(ctx_x)?),
            false => None,
        };
        let ctx_y = match needs(LatentKind::Tra) {
            true => Some(f.encode_context(ctx_y)?),
            false => None,
        };
        Ok(Conditioning {
            h_enc,
            h_x,
            ctx_role,
            ctx_x: ctx_x_rep,
            ctx_y,
        })
    }

    /// Representations fed to the prior of `kind`, in signature order.
    pub fn reps(&self, kind: LatentKind) -> Result<Vec<Var>> {
        let get = |v: Option<Var>, what: &str| {
            v.ok_or_else(|| Error::contract(format!("`{kind}` needs the {what} context, which was not encoded")))
        };
        Ok(match kind {
            LatentKind::Role => vec![self.h_x, get(self.ctx_role, "role")?],
            LatentKind::Dia => vec![self.h_x, get(self.ctx_x, "source")?],
            LatentKind::Tra => vec![self.h_x, get(self.ctx_x, "source")?, get(self.ctx_y, "target")?],
        })
    }
}
