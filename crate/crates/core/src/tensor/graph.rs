use rand::Rng;

use super::broadcast::{broadcast_shape, source_indices};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

// Index maps for broadcast binary ops; `None` when both sides already match
// the output shape.
type BroadcastMaps = Option<(Vec<usize>, Vec<usize>)>;

enum Op {
    Leaf,
    Add(Var, Var, BroadcastMaps),
    Sub(Var, Var, BroadcastMaps),
    Mul(Var, Var, BroadcastMaps),
    Div(Var, Var, BroadcastMaps),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Gather { table: Var, indices: Vec<usize> },
    // Output element i reads input element map[i].
    Remap { x: Var, map: Vec<usize> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    SumAll(Var),
    MeanMasked { h: Var, weights: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, keep: Vec<f64> },
    SmoothedNll { logp: Var, targets: Vec<usize>, weights: Vec<f64>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run tape. Build a fresh graph for every forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph on which `param` records constants; used for inference.
    pub fn without_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Drops every node recorded after the first `len`. Vars at or past
    /// `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    // ----- elementwise binary ops -------------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var, BroadcastMaps) -> Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (value, maps) = if sa == sb {
            let da = self.value(a).data();
            let db = self.value(b).data();
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::new(&sa, data)?, None)
        } else {
            let out = broadcast_shape(op_name, &sa, &sb)?;
            let ia = source_indices(&out, &sa);
            let ib = source_indices(&out, &sb);
            let da = self.value(a).data();
            let db = self.value(b).data();
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            (Tensor::new(&out, data)?, Some((ia, ib)))
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, make(a, b, maps), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.map_value(x, |t| t * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.map_value(x, |t| t + c);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    fn map_value(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        }
    }

    // ----- matrix products --------------------------------------------------------

    /// `a @ b` for `a: [.., m, k]` and `b: [k, n]` (shared across the batch) or
    /// `b: [.., k, n]` with the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for `b: [n, k]` or `[.., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let dims = MatDims::resolve(&sa, &sb, trans_b)?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for (bi, c) in out.chunks_mut(dims.m * dims.n).enumerate() {
            let a_blk = &av[bi * dims.m * dims.k..(bi + 1) * dims.m * dims.k];
            let b_blk = dims.b_block(bv, bi);
            let (rsb, csb) = dims.b_strides();
            gemm(
                dims.m, dims.k, dims.n,
                a_blk, (dims.k as isize, 1),
                b_blk, (rsb, csb),
                c, (dims.n as isize, 1),
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(dims.n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    // ----- shape manipulation -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.len();
        let mut seen = vec![false; n];
        if axes.len() != n || axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let mut in_strides = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let numel: usize = shape.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut counter = vec![0usize; n];
        let mut src = 0usize;
        for _ in 0..numel {
            map.push(src);
            for axis in (0..n).rev() {
                counter[axis] += 1;
                src += strides[axis];
                if counter[axis] < out_shape[axis] {
                    break;
                }
                src -= strides[axis] * out_shape[axis];
                counter[axis] = 0;
            }
        }
        Ok(self.remap(x, map, &out_shape))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let out = broadcast_shape("broadcast_to", &sx, shape)?;
        if out != shape {
            return Err(Error::shape("broadcast_to", &sx, shape));
        }
        let map = source_indices(shape, &sx);
        Ok(self.remap(x, map, shape))
    }

    fn remap(&mut self, x: Var, map: Vec<usize>, shape: &[usize]) -> Var {
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let v = Tensor {
            shape: shape.to_vec(),
            data,
        };
        let rg = self.rg(x);
        self.push(v, Op::Remap { x, map }, rg)
    }

    pub fn concat_last_dim(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last_dim", self.shape(*first), s));
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(xs.to_vec()), rg))
    }

    pub fn slice_last_dim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = last_dim(&shape);
        if len == 0 || start + len > w {
            return Err(Error::shape("slice_last_dim", &shape, &[start, len]));
        }
        let data = self
            .value(x)
            .data()
            .chunks(w)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out = shape;
        *out.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out, data)?, Op::Slice { x, start }, rg))
    }

    /// Rows of a 2-D `table` at `indices`; output shape is `lead ++ [width]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("gather_rows", &ts, lead));
        }
        if lead.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("gather_rows", lead, &[indices.len()]));
        }
        let (rows, w) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let mut shape = lead.to_vec();
        shape.push(w);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup; alias of [`Graph::gather_rows`].
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize], lead: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices, lead)
    }

    // ----- unary nonlinearities -----------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, make: fn(Var) -> Op) -> Var {
        let v = self.map_value(x, f);
        let rg = self.rg(x);
        self.push(v, make(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = last_dim(t.shape());
        if t.numel() == 0 || w == 0 {
            return Err(Error::Domain {
                op: "softmax_last_dim",
                msg: "softmax over an empty axis".into(),
            });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let v = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    pub fn log_softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = last_dim(t.shape());
        if t.numel() == 0 || w == 0 {
            return Err(Error::Domain {
                op: "log_softmax_last_dim",
                msg: "softmax over an empty axis".into(),
            });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let v = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::LogSoftmax(x), rg))
    }

    // ----- reductions -----------------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean of the rows of `h: [.., L, d]` whose `mask: [.., L]` entry is
    /// nonzero. Output `[.., d]`.
    pub fn mean_masked(&mut self, h: Var, mask: &[f64]) -> Result<Var> {
        let shape = self.shape(h).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("mean_masked", &shape, &[mask.len()]));
        }
        let d = shape[shape.len() - 1];
        let len = shape[shape.len() - 2];
        let groups: usize = shape[..shape.len() - 2].iter().product();
        if groups * len != mask.len() {
            return Err(Error::shape("mean_masked", &shape, &[mask.len()]));
        }
        let src = self.value(h).data();
        let mut weights = vec![0.0; mask.len()];
        let mut out = vec![0.0; groups * d];
        for g in 0..groups {
            let m = &mask[g * len..(g + 1) * len];
            let count = m.iter().filter(|&&v| v != 0.0).count();
            if count == 0 {
                return Err(Error::contract("mean_masked: mask selects no position"));
            }
            let acc = &mut out[g * d..(g + 1) * d];
            for (i, &mi) in m.iter().enumerate() {
                if mi == 0.0 {
                    continue;
                }
                weights[g * len + i] = mi;
                let row = &src[(g * len + i) * d..(g * len + i + 1) * d];
                acc.iter_mut().zip(row).for_each(|(a, &r)| *a += mi * r);
            }
            let count = count as f64;
            acc.iter_mut().for_each(|a| *a /= count);
            weights[g * len..(g + 1) * len]
                .iter_mut()
                .for_each(|w| *w /= count);
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(d);
        let rg = self.rg(h);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MeanMasked { h, weights }, rg))
    }

    // ----- layers -----------------------------------------------------------------------

    /// Normalizes over the last axis, then applies `gamma` and `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = last_dim(&shape);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Domain {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let v = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Dropout { x, keep }, rg))
    }

    /// Label-smoothed negative log-likelihood summed over rows of
    /// `logp: [.., V]`, each row weighted by `weights` (0 for padding).
    ///
    /// Row loss: `-(1 - eps) * logp[target] - eps / V * sum_j logp[j]`.
    pub fn smoothed_nll(&mut self, logp: Var, targets: &[usize], weights: &[f64], eps: f64) -> Result<Var> {
        let shape = self.shape(logp).to_vec();
        let v = last_dim(&shape);
        let rows = self.value(logp).numel() / v;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("smoothed_nll", &shape, &[targets.len()]));
        }
        let lp = self.value(logp).data();
        let mut total = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            if t >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    len: v,
                });
            }
            let row = &lp[r * v..(r + 1) * v];
            let mut loss = -(1.0 - eps) * row[t];
            if eps != 0.0 {
                loss -= eps / v as f64 * row.iter().sum::<f64>();
            }
            total += w * loss;
        }
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothedNll {
                logp,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                eps,
            },
            rg,
        ))
    }

    // ----- backward -----------------------------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                accumulate(&mut self.grads[i], &gi);
                continue;
            }
            self.propagate(i, &gi, &mut g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let numel_of = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b, maps) | Op::Sub(a, b, maps) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let buf = slot(g, *a, numel_of(*a));
                    scatter(buf, gy, maps.as_ref().map(|m| &m.0), |gv, _| gv);
                }
                if rg(*b) {
                    let buf = slot(g, *b, numel_of(*b));
                    scatter(buf, gy, maps.as_ref().map(|m| &m.1), |gv, _| sign * gv);
                }
            }
            Op::Mul(a, b, maps) => {
                let (da, db) = (val(*a), val(*b));
                let (ia, ib) = index_fns(maps);
                if rg(*a) {
                    let buf = slot(g, *a, numel_of(*a));
                    scatter(buf, gy, maps.as_ref().map(|m| &m.0), |gv, k| gv * db[ib(k)]);
                }
                if rg(*b) {
                    let buf = slot(g, *b, numel_of(*b));
                    scatter(buf, gy, maps.as_ref().map(|m| &m.1), |gv, k| gv * da[ia(k)]);
                }
            }
            Op::Div(a, b, maps) => {
                let (da, db) = (val(*a), val(*b));
                let (ia, ib) = index_fns(maps);
                if rg(*a) {
                    let buf = slot(g, *a, numel_of(*a));
                    scatter(buf, gy, maps.as_ref().map(|m| &m.0), |gv, k| gv / db[ib(k)]);
                }
                if rg(*b) {
                    let buf = slot(g, *b, numel_of(*b));
                    scatter(buf, gy, maps.as_ref().map(|m| &m.1), |gv, k| {
                        let den = db[ib(k)];
                        -gv * da[ia(k)] / (den * den)
                    });
                }
            }
            Op::Scale(x, c) => {
                let buf = slot(g, *x, gy.len());
                buf.iter_mut().zip(gy).for_each(|(b, &v)| *b += c * v);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let buf = slot(g, *x, gy.len());
                buf.iter_mut().zip(gy).for_each(|(b, &v)| *b += v);
            }
            Op::MatMul { a, b, trans_b } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let dims = MatDims::resolve(sa, sb, *trans_b).expect("validated in forward");
                let (av, bv) = (val(*a), val(*b));
                let (mk, mn) = (dims.m * dims.k, dims.m * dims.n);
                if rg(*a) {
                    let buf = slot(g, *a, av.len());
                    for bi in 0..dims.batch {
                        let gc = &gy[bi * mn..(bi + 1) * mn];
                        let b_blk = dims.b_block(bv, bi);
                        // dA = dC @ B_eff^T, where B_eff is [k, n].
                        let (rsb, csb) = dims.b_strides();
                        gemm_acc(
                            dims.m, dims.n, dims.k,
                            gc, (dims.n as isize, 1),
                            b_blk, (csb, rsb),
                            &mut buf[bi * mk..(bi + 1) * mk], (dims.k as isize, 1),
                        );
                    }
                }
                if rg(*b) {
                    let buf = slot(g, *b, bv.len());
                    for bi in 0..dims.batch {
                        let gc = &gy[bi * mn..(bi + 1) * mn];
                        let a_blk = &av[bi * mk..(bi + 1) * mk];
                        let nk = dims.n * dims.k;
                        let out = if dims.shared_b {
                            &mut buf[..]
                        } else {
                            &mut buf[bi * nk..(bi + 1) * nk]
                        };
                        if *trans_b {
                            // dB[n, k] = dC^T @ A
                            gemm_acc(
                                dims.n, dims.m, dims.k,
                                gc, (1, dims.n as isize),
                                a_blk, (dims.k as isize, 1),
                                out, (dims.k as isize, 1),
                            );
                        } else {
                            // dB[k, n] = A^T @ dC
                            gemm_acc(
                                dims.k, dims.m, dims.n,
                                a_blk, (1, dims.k as isize),
                                gc, (dims.n as isize, 1),
                                out, (dims.n as isize, 1),
                            );
                        }
                    }
                }
            }
            Op::Gather { table, indices } => {
                let w = last_dim(self.nodes[table.0].value.shape());
                let buf = slot(g, *table, numel_of(*table));
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = &mut buf[idx * w..(idx + 1) * w];
                    dst.iter_mut()
                        .zip(&gy[r * w..(r + 1) * w])
                        .for_each(|(d, &v)| *d += v);
                }
            }
            Op::Remap { x, map } => {
                let buf = slot(g, *x, numel_of(*x));
                for (&src, &v) in map.iter().zip(gy) {
                    buf[src] += v;
                }
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs
                    .iter()
                    .map(|x| last_dim(self.nodes[x.0].value.shape()))
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = gy.len() / total;
                let mut offset = 0;
                for (x, &w) in xs.iter().zip(&widths) {
                    if rg(*x) {
                        let buf = slot(g, *x, rows * w);
                        for r in 0..rows {
                            let src = &gy[r * total + offset..r * total + offset + w];
                            buf[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let w_in = last_dim(self.nodes[x.0].value.shape());
                let w_out = last_dim(node.value.shape());
                let buf = slot(g, *x, numel_of(*x));
                for (r, row) in gy.chunks(w_out).enumerate() {
                    buf[r * w_in + start..r * w_in + start + w_out]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, &v)| *d += v);
                }
            }
            Op::Softmax(x) => {
                let w = last_dim(node.value.shape());
                let buf = slot(g, *x, y.len());
                for ((yr, gr), br) in y.chunks(w).zip(gy.chunks(w)).zip(buf.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        br[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let w = last_dim(node.value.shape());
                let buf = slot(g, *x, y.len());
                for ((yr, gr), br) in y.chunks(w).zip(gy.chunks(w)).zip(buf.chunks_mut(w)) {
                    let sum: f64 = gr.iter().sum();
                    for j in 0..w {
                        br[j] += gr[j] - yr[j].exp() * sum;
                    }
                }
            }
            Op::Tanh(x) => elementwise(g, *x, gy, |k, gv| gv * (1.0 - y[k] * y[k])),
            Op::Relu(x) => {
                let xv = val(*x);
                elementwise(g, *x, gy, |k, gv| if xv[k] > 0.0 { gv } else { 0.0 })
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                elementwise(g, *x, gy, |k, gv| gv * sigmoid(xv[k]))
            }
            Op::Sigmoid(x) => elementwise(g, *x, gy, |k, gv| gv * y[k] * (1.0 - y[k])),
            Op::Log(x) => {
                let xv = val(*x);
                elementwise(g, *x, gy, |k, gv| gv / xv[k])
            }
            Op::Exp(x) => elementwise(g, *x, gy, |k, gv| gv * y[k]),
            Op::SumAll(x) => {
                let buf = slot(g, *x, numel_of(*x));
                buf.iter_mut().for_each(|b| *b += gy[0]);
            }
            Op::MeanMasked { h, weights } => {
                let d = last_dim(node.value.shape());
                let len = weights.len() / (gy.len() / d);
                let buf = slot(g, *h, numel_of(*h));
                for (pos, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let grp = pos / len;
                    let src = &gy[grp * d..(grp + 1) * d];
                    buf[pos * d..(pos + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(b, &v)| *b += w * v);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = last_dim(node.value.shape());
                let gv = val(*gamma);
                if rg(*gamma) {
                    let buf = slot(g, *gamma, d);
                    for (xr, gr) in xhat.chunks(d).zip(gy.chunks(d)) {
                        for j in 0..d {
                            buf[j] += gr[j] * xr[j];
                        }
                    }
                }
                if rg(*beta) {
                    let buf = slot(g, *beta, d);
                    for gr in gy.chunks(d) {
                        buf.iter_mut().zip(gr).for_each(|(b, &v)| *b += v);
                    }
                }
                if rg(*x) {
                    let buf = slot(g, *x, gy.len());
                    let n = d as f64;
                    for (r, (xr, gr)) in xhat.chunks(d).zip(gy.chunks(d)).enumerate() {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xr[j];
                        }
                        let is = inv_std[r];
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            buf[r * d + j] += is / n * (n * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => elementwise(g, *x, gy, |k, gv| gv * keep[k]),
            Op::SmoothedNll {
                logp,
                targets,
                weights,
                eps,
            } => {
                let v = last_dim(self.nodes[logp.0].value.shape());
                let buf = slot(g, *logp, numel_of(*logp));
                let uniform = eps / v as f64;
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = &mut buf[r * v..(r + 1) * v];
                    let scale = gy[0] * w;
                    if *eps != 0.0 {
                        row.iter_mut().for_each(|b| *b -= scale * uniform);
                    }
                    row[t] -= scale * (1.0 - eps);
                }
            }
        }
    }
}

fn accumulate(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn slot(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    g[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn elementwise(g: &mut [Option<Vec<f64>>], x: Var, gy: &[f64], f: impl Fn(usize, f64) -> f64) {
    let buf = slot(g, x, gy.len());
    for (k, (b, &gv)) in buf.iter_mut().zip(gy).enumerate() {
        *b += f(k, gv);
    }
}

// Adds `f(gy[k], k)` into `buf[map[k]]` (or `buf[k]` without a map).
fn scatter(buf: &mut [f64], gy: &[f64], map: Option<&Vec<usize>>, f: impl Fn(f64, usize) -> f64) {
    match map {
        None => buf
            .iter_mut()
            .zip(gy)
            .enumerate()
            .for_each(|(k, (b, &gv))| *b += f(gv, k)),
        Some(m) => {
            for (k, (&dst, &gv)) in m.iter().zip(gy).enumerate() {
                buf[dst] += f(gv, k);
            }
        }
    }
}

fn index_fns(maps: &BroadcastMaps) -> (impl Fn(usize) -> usize + '_, impl Fn(usize) -> usize + '_) {
    (
        move |k| maps.as_ref().map_or(k, |m| m.0[k]),
        move |k| maps.as_ref().map_or(k, |m| m.1[k]),
    )
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    trans_b: bool,
}

impl MatDims {
    fn resolve(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(Error::shape(op, sa, sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if shared_b {
            // Fold the batch into rows of one product.
            return Ok(MatDims {
                batch: 1,
                m: batch * m,
                k,
                n,
                shared_b,
                trans_b,
            });
        }
        if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(MatDims {
            batch,
            m,
            k,
            n,
            shared_b,
            trans_b,
        })
    }

    fn b_block<'a>(&self, b: &'a [f64], bi: usize) -> &'a [f64] {
        if self.shared_b {
            b
        } else {
            &b[bi * self.k * self.n..(bi + 1) * self.k * self.n]
        }
    }

    // Row/column strides of the effective [k, n] right operand.
    fn b_strides(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize, k: usize, n: usize,
    a: &[f64], sa: (isize, isize),
    b: &[f64], sb: (isize, isize),
    c: &mut [f64], sc: (isize, isize),
) {
    gemm_beta(m, k, n, a, sa, b, sb, c, sc, 0.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize, k: usize, n: usize,
    a: &[f64], sa: (isize, isize),
    b: &[f64], sb: (isize, isize),
    c: &mut [f64], sc: (isize, isize),
) {
    gemm_beta(m, k, n, a, sa, b, sb, c, sc, 1.0)
}

#[allow(clippy::too_many_arguments)]
fn gemm_beta(
    m: usize, k: usize, n: usize,
    a: &[f64], sa: (isize, isize),
    b: &[f64], sb: (isize, isize),
    c: &mut [f64], sc: (isize, isize),
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: every operand is a dense m*k, k*n or m*n block whose strides
    // stay inside the slice, as asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), sa.0, sa.1,
            b.as_ptr(), sb.0, sb.1,
            beta,
            c.as_mut_ptr(), sc.0, sc.1,
        );
    }
}
