//! Building blocks shared by the encoder, decoder and teacher.

use mddkit_tensor::{Graph, Tensor, Var};
use rand::Rng;

use super::params::{Bound, Params};
use super::rope::{rope, rope_node};
use crate::error::{invalid, Result};

/// Additive mask value for disallowed attention cells.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new<R: Rng>(p: &mut Params, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: p.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng),
            b: p.add_uniform(format!("{name}.b"), &[d_out], d_in, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        Ok(g.add(y, p.var(self.b))?)
    }

    /// Graph-free `x W + b` for `rows` row-major inputs.
    pub(crate) fn apply(&self, p: &Params, x: &[f64], rows: usize) -> Vec<f64> {
        let w = &p.tensors()[self.w];
        let b = p.tensors()[self.b].data();
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let mut out = Vec::with_capacity(rows * d_out);
        for r in 0..rows {
            let mut acc = b.to_vec();
            for (i, &xi) in x[r * d_in..(r + 1) * d_in].iter().enumerate() {
                for (a, &wij) in acc.iter_mut().zip(&w.data()[i * d_out..(i + 1) * d_out]) {
                    *a += xi * wij;
                }
            }
            out.extend(acc);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new(p: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gamma: p.add_const(format!("{name}.gamma"), &[dim], 1.0),
            beta: p.add_const(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.var(self.gamma), p.var(self.beta), 1e-5)?)
    }

    /// Normalises one row in place.
    pub(crate) fn apply_row(&self, p: &Params, row: &mut [f64]) {
        let (g, b) = (p.tensors()[self.gamma].data(), p.tensors()[self.beta].data());
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rs * g[j] + b[j];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        p: &mut Params,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * c_in;
        Self {
            w: p.add_uniform(format!("{name}.w"), &[kernel, c_in, c_out], fan_in, rng),
            b: p.add_uniform(format!("{name}.b"), &[c_out], fan_in, rng),
            stride,
            padding,
        }
    }

    /// Same-length convolution with odd kernel.
    pub fn same<R: Rng>(p: &mut Params, name: &str, kernel: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::new(p, name, kernel, c_in, c_out, 1, kernel / 2, rng)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv1d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.padding)?)
    }
}

/// Multi-head attention with rotary embeddings applied to queries and keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnOut {
    pub out: Var,
    /// Head-averaged weights, `queries x keys`; present when requested.
    pub weights: Option<Var>,
}

impl Attention {
    pub fn new<R: Rng>(p: &mut Params, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(p, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(p, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(p, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(p, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: Var,
        memory: Var,
        q_pos: &[f64],
        k_pos: &[f64],
        mask: Option<Var>,
        want_weights: bool,
    ) -> Result<AttnOut> {
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, memory)?;
        let v = self.v.forward(g, p, memory)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut avg: Option<Var> = None;
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let qh = rope_node(g, qh, q_pos)?;
            let kh = rope_node(g, kh, k_pos)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax(s, 1)?;
            if want_weights {
                avg = Some(match avg {
                    None => a,
                    Some(acc) => g.add(acc, a)?,
                });
            }
            outs.push(g.matmul(a, vh)?);
        }
        let cat = g.concat(&outs, 1)?;
        let out = self.o.forward(g, p, cat)?;
        let weights = avg.map(|w| g.scale(w, 1.0 / self.heads as f64));
        Ok(AttnOut { out, weights })
    }

    fn rope_heads(&self, x: Vec<f64>, positions: &[f64]) -> Result<Vec<f64>> {
        let rows = positions.len();
        let dh = self.dim / self.heads;
        let mut out = x.clone();
        for h in 0..self.heads {
            let slice: Vec<f64> = (0..rows)
                .flat_map(|r| x[r * self.dim + h * dh..r * self.dim + (h + 1) * dh].iter().copied())
                .collect();
            let rot = rope(&Tensor::new(vec![rows, dh], slice)?, positions)?;
            for r in 0..rows {
                out[r * self.dim + h * dh..r * self.dim + (h + 1) * dh]
                    .copy_from_slice(&rot.data()[r * dh..(r + 1) * dh]);
            }
        }
        Ok(out)
    }

    /// Rotated keys and plain values for `positions.len()` memory rows.
    pub(crate) fn keys_values(&self, p: &Params, memory: &[f64], positions: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let rows = positions.len();
        let k = self.rope_heads(self.k.apply(p, memory, rows), positions)?;
        Ok((k, self.v.apply(p, memory, rows)))
    }

    /// Attention output for a single query row at `pos` over cached keys.
    pub(crate) fn attend_row(&self, p: &Params, x: &[f64], pos: f64, keys: &[f64], values: &[f64]) -> Result<Vec<f64>> {
        let dh = self.dim / self.heads;
        let q = self.rope_heads(self.q.apply(p, x, 1), &[pos])?;
        let nk = keys.len() / self.dim;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut cat = vec![0.0; self.dim];
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let scores: Vec<f64> = (0..nk)
                .map(|t| {
                    q[lo..hi]
                        .iter()
                        .zip(&keys[t * self.dim + lo..t * self.dim + hi])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (t, e) in exps.iter().enumerate() {
                let w = e / z;
                for (c, v) in cat[lo..hi].iter_mut().zip(&values[t * self.dim + lo..t * self.dim + hi]) {
                    *c += w * v;
                }
            }
        }
        Ok(self.o.apply(p, &cat, 1))
    }
}

/// Additive causal mask for `len` positions.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = MASKED;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    a: Linear,
    b: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(p: &mut Params, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            a: Linear::new(p, &format!("{name}.in"), dim, hidden, rng),
            b: Linear::new(p, &format!("{name}.out"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.a.forward(g, p, x)?;
        let h = g.relu(h);
        self.b.forward(g, p, h)
    }

    pub(crate) fn apply_row(&self, p: &Params, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.a.apply(p, x, 1).into_iter().map(|v| v.max(0.0)).collect();
        self.b.apply(p, &h, 1)
    }
}

/// Residual add followed by layer norm.
pub fn add_norm(g: &mut Graph, p: &Bound, ln: &LayerNorm, x: Var, y: Var) -> Result<Var> {
    let s = g.add(x, y)?;
    ln.forward(g, p, s)
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 || (dim / heads) % 2 != 0 {
        return Err(invalid(format!(
            "hidden size {dim} must split into {heads} heads of even width"
        )));
    }
    Ok(())
}
