//! Autoregressive phoneme decoder: causal rotary self-attention, rotary
//! cross-attention over encoder states, feed-forward; post-norm throughout.

use mddkit_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{add_norm, causal_mask, check_heads, Attention, FeedForward, LayerNorm, Linear};
use super::params::{Bound, Params};
use super::rope::positions;
use crate::error::{invalid, shape, Result};
use crate::vocab::Specials;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Encoder frames are placed at `frame * memory_position_scale` for the
    /// rotary cross-attention, roughly one unit per phoneme.
    pub memory_position_scale: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 16,
            memory_position_scale: 0.2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 8 || self.vocab_size < 5 || self.ffn_dim == 0 {
            return Err(invalid("decoder hidden_dim >= 8, vocab_size >= 5 and ffn_dim > 0 required"));
        }
        if !(self.memory_position_scale >= 0.0) {
            return Err(invalid("memory_position_scale must be non-negative"));
        }
        check_heads(self.hidden_dim, self.num_heads)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    self_attn: Attention,
    ln_self: LayerNorm,
    cross: Attention,
    ln_cross: LayerNorm,
    ffn: FeedForward,
    ln_ffn: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    cfg: DecoderConfig,
    params: Params,
    embed: usize,
    layers: Vec<Layer>,
    out: Linear,
}

/// Per-layer cross-attention keys and values for one memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCache {
    kv: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Incremental decoding state: cached self-attention keys/values and the
/// newest hidden row.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    self_kv: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
    hidden: Vec<f64>,
}

impl DecoderState {
    /// Tokens consumed so far, `<bos>` included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderNodes {
    /// `L x D` states, one per input token.
    pub hidden: Var,
    /// `L x V` next-token logits.
    pub logits: Var,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = cfg.hidden_dim;
        let embed = p.add_uniform("dec.embed".into(), &[cfg.vocab_size, d], 1, &mut rng);
        let layers = (0..cfg.num_layers)
            .map(|l| Layer {
                self_attn: Attention::new(&mut p, &format!("dec.layer{l}.self"), d, cfg.num_heads, &mut rng),
                ln_self: LayerNorm::new(&mut p, &format!("dec.layer{l}.ln_self"), d),
                cross: Attention::new(&mut p, &format!("dec.layer{l}.cross"), d, cfg.num_heads, &mut rng),
                ln_cross: LayerNorm::new(&mut p, &format!("dec.layer{l}.ln_cross"), d),
                ffn: FeedForward::new(&mut p, &format!("dec.layer{l}.ffn"), d, cfg.ffn_dim, &mut rng),
                ln_ffn: LayerNorm::new(&mut p, &format!("dec.layer{l}.ln_ffn"), d),
            })
            .collect();
        let out = Linear::new(&mut p, "dec.out", d, cfg.vocab_size, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            embed,
            layers,
            out,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn specials(&self) -> Specials {
        Specials::for_size(self.cfg.vocab_size)
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_prefix(&self, tokens: &[usize]) -> Result<()> {
        let sp = self.specials();
        if tokens.first() != Some(&sp.bos) {
            return Err(invalid("decoder input must start with <bos>"));
        }
        if let Some(bad) = tokens[1..]
            .iter()
            .find(|&&t| t >= self.cfg.vocab_size || t == sp.bos || t == sp.eos || t == sp.blank)
        {
            return Err(invalid(format!("token {bad} not allowed inside a decoder prefix")));
        }
        Ok(())
    }

    /// Teacher-forced pass over `tokens` (starting with `<bos>`).
    pub fn forward(&self, g: &mut Graph, p: &Bound, memory: Var, tokens: &[usize]) -> Result<DecoderNodes> {
        self.check_prefix(tokens)?;
        let (n, dm) = g.value(memory).dims2()?;
        if dm != self.cfg.hidden_dim || n == 0 {
            return Err(shape(format!(
                "decoder memory must be n x {}, got {n} x {dm}",
                self.cfg.hidden_dim
            )));
        }
        let len = tokens.len();
        let q_pos = positions(len, 1.0);
        let m_pos = positions(n, self.cfg.memory_position_scale);
        let mask = g.constant(causal_mask(len));
        let mut h = g.gather_rows(p.var(self.embed), tokens)?;
        for l in &self.layers {
            let s = l.self_attn.forward(g, p, h, h, &q_pos, &q_pos, Some(mask), false)?;
            h = add_norm(g, p, &l.ln_self, h, s.out)?;
            let c = l.cross.forward(g, p, h, memory, &q_pos, &m_pos, None, false)?;
            h = add_norm(g, p, &l.ln_cross, h, c.out)?;
            let f = l.ffn.forward(g, p, h)?;
            h = add_norm(g, p, &l.ln_ffn, h, f)?;
        }
        let logits = self.out.forward(g, p, h)?;
        Ok(DecoderNodes { hidden: h, logits })
    }

    /// Projects `memory` once for repeated incremental steps.
    pub fn cache_memory(&self, memory: &Tensor) -> Result<MemoryCache> {
        let (n, dm) = memory.dims2()?;
        if dm != self.cfg.hidden_dim || n == 0 {
            return Err(shape(format!(
                "decoder memory must be n x {}, got {n} x {dm}",
                self.cfg.hidden_dim
            )));
        }
        let m_pos = positions(n, self.cfg.memory_position_scale);
        let kv = self
            .layers
            .iter()
            .map(|l| l.cross.keys_values(&self.params, memory.data(), &m_pos))
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryCache { kv })
    }

    /// State after feeding `<bos>`.
    pub fn begin(&self, cache: &MemoryCache) -> Result<DecoderState> {
        let empty = DecoderState {
            self_kv: vec![(Vec::new(), Vec::new()); self.layers.len()],
            len: 0,
            hidden: Vec::new(),
        };
        self.push_token(cache, &empty, self.specials().bos)
    }

    /// Feeds one prefix token (a phoneme or `<sil>`).
    pub fn advance(&self, cache: &MemoryCache, state: &DecoderState, token: usize) -> Result<DecoderState> {
        let sp = self.specials();
        if token >= self.cfg.vocab_size || token == sp.bos || token == sp.eos || token == sp.blank {
            return Err(invalid(format!("token {token} not allowed inside a decoder prefix")));
        }
        self.push_token(cache, state, token)
    }

    fn push_token(&self, cache: &MemoryCache, state: &DecoderState, token: usize) -> Result<DecoderState> {
        let d = self.cfg.hidden_dim;
        let pos = state.len as f64;
        let table = self.params.tensors()[self.embed].data();
        let mut h = table[token * d..(token + 1) * d].to_vec();
        let mut self_kv = state.self_kv.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (k, v) = layer.self_attn.keys_values(&self.params, &h, &[pos])?;
            self_kv[l].0.extend(k);
            self_kv[l].1.extend(v);
            let s = layer.self_attn.attend_row(&self.params, &h, pos, &self_kv[l].0, &self_kv[l].1)?;
            h.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            layer.ln_self.apply_row(&self.params, &mut h);
            let (mk, mv) = &cache.kv[l];
            let c = layer.cross.attend_row(&self.params, &h, pos, mk, mv)?;
            h.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
            layer.ln_cross.apply_row(&self.params, &mut h);
            let f = layer.ffn.apply_row(&self.params, &h);
            h.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
            layer.ln_ffn.apply_row(&self.params, &mut h);
        }
        Ok(DecoderState {
            self_kv,
            len: state.len + 1,
            hidden: h,
        })
    }

    /// Next-token log-probabilities from an incremental state.
    pub fn next_log_probs(&self, state: &DecoderState, temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {temperature}")));
        }
        let logits = self.out.apply(&self.params, &state.hidden, 1);
        let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(scaled.iter().map(|v| v - lse).collect())
    }

    /// Next-token log-probabilities after `prefix`, scaled by `1/temperature`
    /// before normalisation.
    pub fn step_log_probs(&self, memory: &Tensor, prefix: &[usize], temperature: f64) -> Result<Vec<f64>> {
        let rows = self.log_probs_all(memory, prefix, temperature)?;
        let v = self.cfg.vocab_size;
        Ok(rows[(prefix.len() - 1) * v..].to_vec())
    }

    /// Log-probabilities for every position of a teacher-forced pass,
    /// row-major `L x V`.
    pub fn log_probs_all(&self, memory: &Tensor, tokens: &[usize], temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {temperature}")));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mem = g.constant(memory.clone());
        let out = self.forward(&mut g, &p, mem, tokens)?;
        let scaled = g.scale(out.logits, 1.0 / temperature);
        let lp = g.log_softmax(scaled, 1)?;
        Ok(g.value(lp).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn incremental_matches_teacher_forced() {
        let cfg = DecoderConfig {
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 24,
            vocab_size: 9,
            ..Default::default()
        };
        let dec = Decoder::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let memory = Tensor::new(vec![7, 16], (0..7 * 16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let sp = dec.specials();
        let tokens = [sp.bos, 0, 3, 3, sp.sil, 1];
        let full = dec.log_probs_all(&memory, &tokens, 1.1).unwrap();
        let cache = dec.cache_memory(&memory).unwrap();
        let mut st = dec.begin(&cache).unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            if i > 0 {
                st = dec.advance(&cache, &st, t).unwrap();
            }
            let row = dec.next_log_probs(&st, 1.1).unwrap();
            for (a, b) in row.iter().zip(&full[i * 9..(i + 1) * 9]) {
                assert!((a - b).abs() < 1e-10, "position {i}: {a} vs {b}");
            }
        }
        assert!(dec.advance(&cache, &st, sp.eos).is_err());
    }
}
