//! Acoustic encoder: input projection, then blocks of
//! (conv + residual + norm, rotary self-attention + residual + norm),
//! with a per-frame classifier and a scalar frame-score head.

use mddkit_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_norm, check_heads, Attention, Conv, LayerNorm, Linear};
use super::params::{Bound, Params};
use super::rope::positions;
use crate::error::{invalid, shape, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_conv_blocks: usize,
    pub kernel: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 64,
            num_conv_blocks: 2,
            kernel: 3,
            num_heads: 4,
            vocab_size: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 8 {
            return Err(invalid(format!("encoder hidden_dim {} < 8", self.hidden_dim)));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid("encoder kernel must be odd"));
        }
        if self.input_dim == 0 || self.vocab_size < 5 {
            return Err(invalid("encoder input_dim and vocab_size must be positive (vocab >= 5)"));
        }
        check_heads(self.hidden_dim, self.num_heads)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv: Conv,
    ln_conv: LayerNorm,
    attn: Attention,
    ln_attn: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: Params,
    input: Linear,
    blocks: Vec<Block>,
    classifier: Linear,
    scorer: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub hidden: Var,
    pub logits: Var,
    /// Length-`n` vector.
    pub scores: Var,
}

/// Plain-value encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub hidden: Tensor,
    pub logits: Tensor,
    pub scores: Vec<f64>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = cfg.hidden_dim;
        let input = Linear::new(&mut p, "enc.input", cfg.input_dim, d, &mut rng);
        let blocks = (0..cfg.num_conv_blocks)
            .map(|b| Block {
                conv: Conv::same(&mut p, &format!("enc.block{b}.conv"), cfg.kernel, d, d, &mut rng),
                ln_conv: LayerNorm::new(&mut p, &format!("enc.block{b}.ln_conv"), d),
                attn: Attention::new(&mut p, &format!("enc.block{b}.attn"), d, cfg.num_heads, &mut rng),
                ln_attn: LayerNorm::new(&mut p, &format!("enc.block{b}.ln_attn"), d),
            })
            .collect();
        let classifier = Linear::new(&mut p, "enc.classifier", d, cfg.vocab_size, &mut rng);
        let scorer = Linear::new(&mut p, "enc.scorer", d, 1, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            input,
            blocks,
            classifier,
            scorer,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<EncoderNodes> {
        let (n, d_in) = g.value(x).dims2()?;
        if d_in != self.cfg.input_dim || n == 0 {
            return Err(shape(format!(
                "encoder expects n x {} input, got {n} x {d_in}",
                self.cfg.input_dim
            )));
        }
        let pos = positions(n, 1.0);
        let mut h = self.input.forward(g, p, x)?;
        for b in &self.blocks {
            let c = b.conv.forward(g, p, h)?;
            let c = g.relu(c);
            h = add_norm(g, p, &b.ln_conv, h, c)?;
            let a = b.attn.forward(g, p, h, h, &pos, &pos, None, false)?;
            h = add_norm(g, p, &b.ln_attn, h, a.out)?;
        }
        let logits = self.classifier.forward(g, p, h)?;
        let s = self.scorer.forward(g, p, h)?;
        let scores = g.reshape(s, &[n])?;
        Ok(EncoderNodes {
            hidden: h,
            logits,
            scores,
        })
    }

    /// Forward pass with frozen parameters.
    pub fn encode(&self, x: &Tensor) -> Result<Encoded> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok(Encoded {
            hidden: g.value(out.hidden).clone(),
            logits: g.value(out.logits).clone(),
            scores: g.value(out.scores).data().to_vec(),
        })
    }
}
