//! Training-only error teacher. Canonical embeddings query the (downsampled)
//! encoder states and the decoder states through two fusion stacks; the
//! concatenated result feeds a conv trunk with a position head and a type
//! head.

use mddkit_tensor::{Graph, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_norm, check_heads, Attention, Conv, FeedForward, LayerNorm, Linear};
use super::params::{Bound, Params};
use super::rope::positions;
use crate::error::{invalid, shape, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub fun_layers: usize,
    pub downsample_factor: usize,
    pub trunk_dim: usize,
    pub pos_branch_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            fun_layers: 2,
            downsample_factor: 4,
            trunk_dim: 32,
            pos_branch_dim: 16,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 16,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return Err(invalid("downsample_factor must be >= 1"));
        }
        if self.fun_layers == 0 || self.trunk_dim == 0 || self.pos_branch_dim == 0 {
            return Err(invalid("teacher layer counts and widths must be positive"));
        }
        check_heads(self.hidden_dim, self.num_heads)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FunLayer {
    self_attn: Attention,
    ln_self: LayerNorm,
    cross: Attention,
    ln_cross: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
}

/// Transformer-decoder-style fusion stack (no causal mask).
#[derive(Debug, Clone, PartialEq)]
struct Fusion {
    layers: Vec<FunLayer>,
}

impl Fusion {
    fn new<R: rand::Rng>(p: &mut Params, name: &str, cfg: &TeacherConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        Self {
            layers: (0..cfg.fun_layers)
                .map(|l| FunLayer {
                    self_attn: Attention::new(p, &format!("{name}.layer{l}.self"), d, cfg.num_heads, rng),
                    ln_self: LayerNorm::new(p, &format!("{name}.layer{l}.ln_self"), d),
                    cross: Attention::new(p, &format!("{name}.layer{l}.cross"), d, cfg.num_heads, rng),
                    ln_cross: LayerNorm::new(p, &format!("{name}.layer{l}.ln_cross"), d),
                    ffn: FeedForward::new(p, &format!("{name}.layer{l}.ffn"), d, cfg.ffn_dim, rng),
                    ln_ffn: LayerNorm::new(p, &format!("{name}.layer{l}.ln_ffn"), d),
                })
                .collect(),
        }
    }

    /// Returns the fused states and the last layer's cross-attention map.
    fn forward(&self, g: &mut Graph, p: &Bound, query: Var, memory: Var) -> Result<(Var, Var)> {
        let m = g.shape(query)[0];
        let n = g.shape(memory)[0];
        let q_pos = positions(m, 1.0);
        // Memory positions are stretched onto the query axis so the rotary
        // bias favours the diagonal.
        let k_pos = positions(n, m as f64 / n as f64);
        let mut h = query;
        let mut attn = None;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let s = l.self_attn.forward(g, p, h, h, &q_pos, &q_pos, None, false)?;
            h = add_norm(g, p, &l.ln_self, h, s.out)?;
            let c = l.cross.forward(g, p, h, memory, &q_pos, &k_pos, None, i == last)?;
            attn = c.weights;
            h = add_norm(g, p, &l.ln_cross, h, c.out)?;
            let f = l.ffn.forward(g, p, h)?;
            h = add_norm(g, p, &l.ln_ffn, h, f)?;
        }
        Ok((h, attn.expect("fusion stack has at least one layer")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    cfg: TeacherConfig,
    params: Params,
    embed: usize,
    downsample: Conv,
    fun_enc: Fusion,
    fun_dec: Fusion,
    trunk: Conv,
    pos_conv: Conv,
    pos_out: Linear,
    type_out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherNodes {
    /// Length-`m` mispronunciation probabilities.
    pub pos_probs: Var,
    /// `m x 4` distribution over correct/substitution/deletion/insertion.
    pub type_probs: Var,
    /// `m x n'` map over downsampled encoder states.
    pub attn_enc: Var,
    /// `m x L` map over decoder states.
    pub attn_dec: Var,
}

impl Teacher {
    pub fn new(cfg: TeacherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = cfg.hidden_dim;
        let f = cfg.downsample_factor;
        let embed = p.add_uniform("teacher.embed".into(), &[cfg.vocab_size, d], 1, &mut rng);
        let downsample = Conv::new(&mut p, "teacher.downsample", f, d, d, f, 0, &mut rng);
        let fun_enc = Fusion::new(&mut p, "teacher.fun_enc", &cfg, &mut rng);
        let fun_dec = Fusion::new(&mut p, "teacher.fun_dec", &cfg, &mut rng);
        let trunk = Conv::same(&mut p, "teacher.trunk", 3, 2 * d, cfg.trunk_dim, &mut rng);
        let pos_conv = Conv::same(&mut p, "teacher.pos_conv", 3, cfg.trunk_dim, cfg.pos_branch_dim, &mut rng);
        let pos_out = Linear::new(&mut p, "teacher.pos_out", cfg.pos_branch_dim, 1, &mut rng);
        let type_out = Linear::new(&mut p, "teacher.type_out", cfg.trunk_dim, 4, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            embed,
            downsample,
            fun_enc,
            fun_dec,
            trunk,
            pos_conv,
            pos_out,
            type_out,
        })
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        h_enc: Var,
        h_dec: Var,
        canonical: &[usize],
    ) -> Result<TeacherNodes> {
        let m = canonical.len();
        if m == 0 {
            return Err(invalid("teacher needs a non-empty canonical sequence"));
        }
        if let Some(bad) = canonical.iter().find(|&&c| c >= self.cfg.vocab_size) {
            return Err(invalid(format!("canonical id {bad} outside vocabulary")));
        }
        let n = g.shape(h_enc)[0];
        if n < self.cfg.downsample_factor {
            return Err(shape(format!(
                "{n} encoder frames downsample by {} to an empty memory",
                self.cfg.downsample_factor
            )));
        }
        let h_can = g.gather_rows(p.var(self.embed), canonical)?;
        let mem = self.downsample.forward(g, p, h_enc)?;
        let (h_mis_enc, attn_enc) = self.fun_enc.forward(g, p, h_can, mem)?;
        let (h_mis_dec, attn_dec) = self.fun_dec.forward(g, p, h_can, h_dec)?;
        let h_mis = g.concat(&[h_mis_enc, h_mis_dec], 1)?;
        let u = self.trunk.forward(g, p, h_mis)?;
        let u = g.relu(u);
        let b = self.pos_conv.forward(g, p, u)?;
        let b = g.relu(b);
        let b = self.pos_out.forward(g, p, b)?;
        let b = g.reshape(b, &[m])?;
        let pos_probs = g.sigmoid(b);
        let t = self.type_out.forward(g, p, u)?;
        let type_probs = g.softmax(t, 1)?;
        Ok(TeacherNodes {
            pos_probs,
            type_probs,
            attn_enc,
            attn_dec,
        })
    }
}
